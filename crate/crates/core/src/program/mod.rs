//! Vertex-centric node programs.
//!
//! A program is a deterministic step function over one vertex: it sees the
//! vertex as of the program's timestamp, its own per-vertex state and the
//! parameters carried by the hop, and returns a result fragment plus the
//! next hops. Fragments are merged once every hop has finished.

mod stock;

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use thiserror::Error;

pub use stock::{ClusteringCoefficient, CountEdges, GetEdges, GetNode, Reachability};

use crate::graph::VertexView;
use crate::model::Handle;

pub type Params = BTreeMap<String, String>;
pub type ProgState = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProgramError {
    #[error("no program named {0}")]
    UnknownProgram(String),
    #[error("program {0} is already registered")]
    Duplicate(String),
    #[error("vertex {0} not found")]
    NotFound(Handle),
    #[error("bad parameters: {0}")]
    BadParams(String),
}

pub struct StepInput<'a> {
    pub handle: &'a str,
    /// `None` when the vertex does not exist at the program's timestamp.
    pub vertex: Option<&'a VertexView>,
    pub state: &'a mut ProgState,
    pub params: &'a Params,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepOutput {
    pub fragment: Option<Params>,
    pub hops: Vec<(Handle, Params)>,
}

pub trait NodeProgram: Send + Sync {
    fn name(&self) -> &str;

    fn validate(&self, starts: &[Handle], params: &Params) -> Result<(), ProgramError> {
        let _ = (starts, params);
        Ok(())
    }

    fn step(&self, input: StepInput<'_>) -> StepOutput;

    /// Combines all fragments. Callers pass fragments sorted, so the result
    /// does not depend on the order hops happened to finish in.
    fn merge(&self, fragments: Vec<Params>) -> Result<Params, ProgramError>;
}

#[derive(Clone, Default)]
pub struct ProgramRegistry {
    programs: BTreeMap<String, Arc<dyn NodeProgram>>,
}

impl std::fmt::Debug for ProgramRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.programs.keys()).finish()
    }
}

impl ProgramRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry holding the five stock programs.
    pub fn with_stock() -> Self {
        let mut r = ProgramRegistry::new();
        for p in [
            Arc::new(Reachability) as Arc<dyn NodeProgram>,
            Arc::new(GetNode),
            Arc::new(GetEdges),
            Arc::new(CountEdges),
            Arc::new(ClusteringCoefficient),
        ] {
            r.register(p).expect("stock names are distinct");
        }
        r
    }

    pub fn register(&mut self, program: Arc<dyn NodeProgram>) -> Result<(), ProgramError> {
        let name = program.name().to_owned();
        if self.programs.contains_key(&name) {
            return Err(ProgramError::Duplicate(name));
        }
        self.programs.insert(name, program);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn NodeProgram>, ProgramError> {
        self.programs
            .get(name)
            .cloned()
            .ok_or_else(|| ProgramError::UnknownProgram(name.to_owned()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.programs.keys().map(String::as_str).collect()
    }
}

/// Sorts fragments and merges them.
pub fn merge_fragments(
    program: &dyn NodeProgram,
    mut fragments: Vec<Params>,
) -> Result<Params, ProgramError> {
    fragments.sort();
    program.merge(fragments)
}

/// Runs a program to completion in one process against `view`. Hops are
/// processed breadth first.
pub fn run_local<F>(
    program: &dyn NodeProgram,
    starts: &[Handle],
    params: &Params,
    view: F,
) -> Result<Params, ProgramError>
where
    F: Fn(&str) -> Option<VertexView>,
{
    program.validate(starts, params)?;
    let mut states: BTreeMap<Handle, ProgState> = BTreeMap::new();
    let mut queue: VecDeque<(Handle, Params)> =
        starts.iter().map(|h| (h.clone(), params.clone())).collect();
    let mut fragments = Vec::new();
    while let Some((h, p)) = queue.pop_front() {
        let v = view(&h);
        let state = states.entry(h.clone()).or_default();
        let out = program.step(StepInput {
            handle: &h,
            vertex: v.as_ref(),
            state,
            params: &p,
        });
        fragments.extend(out.fragment);
        queue.extend(out.hops);
    }
    merge_fragments(program, fragments)
}

/// Parses an edge filter: `key` requires the property to exist, `key=value`
/// requires an exact value.
pub fn edge_matches(filter: Option<&str>, props: &BTreeMap<String, String>) -> bool {
    match filter {
        None | Some("") => true,
        Some(f) => match f.split_once('=') {
            Some((k, v)) => props.get(k).is_some_and(|x| x == v),
            None => props.contains_key(f),
        },
    }
}

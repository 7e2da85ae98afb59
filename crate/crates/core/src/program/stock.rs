use std::collections::BTreeSet;

use super::{edge_matches, NodeProgram, Params, ProgramError, StepInput, StepOutput};
use crate::graph::EdgeView;
use crate::model::Handle;

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("program values serialize")
}

fn parse_list(s: Option<&String>) -> Vec<Handle> {
    s.and_then(|s| serde_json::from_str(s).ok())
        .unwrap_or_default()
}

fn single_start(name: &str, starts: &[Handle]) -> Result<(), ProgramError> {
    if starts.len() == 1 {
        Ok(())
    } else {
        Err(ProgramError::BadParams(format!(
            "{name} takes exactly one start vertex, got {}",
            starts.len()
        )))
    }
}

fn missing(handle: &str) -> StepOutput {
    let mut f = Params::new();
    f.insert("missing".into(), handle.to_owned());
    StepOutput {
        fragment: Some(f),
        hops: Vec::new(),
    }
}

fn check_missing(fragments: &[Params]) -> Result<(), ProgramError> {
    match fragments.iter().find_map(|f| f.get("missing")) {
        Some(h) => Err(ProgramError::NotFound(h.clone())),
        None => Ok(()),
    }
}

/// Path search from the start vertex to `to`. Returns the shortest path,
/// ties broken by the lexicographically smallest vertex list and then edge
/// list. Each vertex remembers the best partial path that reached it and
/// only expands strictly better ones.
#[derive(Debug, Clone, Copy, Default)]
pub struct Reachability;

type Candidate = (usize, Vec<Handle>, Vec<Handle>);

impl NodeProgram for Reachability {
    fn name(&self) -> &str {
        "reachability"
    }

    fn validate(&self, starts: &[Handle], params: &Params) -> Result<(), ProgramError> {
        single_start(self.name(), starts)?;
        if !params.contains_key("to") {
            return Err(ProgramError::BadParams("reachability needs `to`".into()));
        }
        Ok(())
    }

    fn step(&self, input: StepInput<'_>) -> StepOutput {
        let Some(vertex) = input.vertex else {
            return StepOutput::default();
        };
        let mut path = parse_list(input.params.get("path"));
        if path.is_empty() {
            path.push(input.handle.to_owned());
        }
        let edges = parse_list(input.params.get("edges"));
        let cand: Candidate = (edges.len(), path, edges);
        if let Some(best) = input
            .state
            .get("best")
            .and_then(|b| serde_json::from_str::<Candidate>(b).ok())
        {
            if best <= cand {
                return StepOutput::default();
            }
        }
        input.state.insert("best".into(), json(&cand));
        let (_, path, edges) = cand;
        let to = input.params.get("to").map(String::as_str).unwrap_or("");
        if input.handle == to {
            let mut f = Params::new();
            f.insert("path".into(), json(&path));
            f.insert("edges".into(), json(&edges));
            return StepOutput {
                fragment: Some(f),
                hops: Vec::new(),
            };
        }
        let filter = input.params.get("edge_property").map(String::as_str);
        let mut hops = Vec::new();
        for e in &vertex.edges {
            if !edge_matches(filter, &e.props) || path.contains(&e.dst) {
                continue;
            }
            let mut p = input.params.clone();
            let mut next_path = path.clone();
            next_path.push(e.dst.clone());
            let mut next_edges = edges.clone();
            next_edges.push(e.handle.clone());
            p.insert("path".into(), json(&next_path));
            p.insert("edges".into(), json(&next_edges));
            hops.push((e.dst.clone(), p));
        }
        StepOutput {
            fragment: None,
            hops,
        }
    }

    fn merge(&self, fragments: Vec<Params>) -> Result<Params, ProgramError> {
        let best = fragments
            .iter()
            .map(|f| {
                let path = parse_list(f.get("path"));
                let edges = parse_list(f.get("edges"));
                (edges.len(), path, edges)
            })
            .min();
        let mut out = Params::new();
        match best {
            Some((len, path, edges)) => {
                out.insert("reachable".into(), "true".into());
                out.insert("path".into(), json(&path));
                out.insert("edges".into(), json(&edges));
                out.insert("length".into(), len.to_string());
            }
            None => {
                out.insert("reachable".into(), "false".into());
                out.insert("path".into(), "[]".into());
                out.insert("edges".into(), "[]".into());
                out.insert("length".into(), "0".into());
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GetNode;

impl NodeProgram for GetNode {
    fn name(&self) -> &str {
        "get_node"
    }

    fn validate(&self, starts: &[Handle], _: &Params) -> Result<(), ProgramError> {
        single_start(self.name(), starts)
    }

    fn step(&self, input: StepInput<'_>) -> StepOutput {
        let Some(v) = input.vertex else {
            return missing(input.handle);
        };
        let mut f = Params::new();
        f.insert("vertex".into(), json(v));
        StepOutput {
            fragment: Some(f),
            hops: Vec::new(),
        }
    }

    fn merge(&self, fragments: Vec<Params>) -> Result<Params, ProgramError> {
        check_missing(&fragments)?;
        Ok(fragments.into_iter().next().unwrap_or_default())
    }
}

fn filtered_edges<'a>(input: &StepInput<'a>) -> Vec<&'a EdgeView> {
    let filter = input.params.get("filter").map(String::as_str);
    input
        .vertex
        .map(|v| {
            v.edges
                .iter()
                .filter(|e| edge_matches(filter, &e.props))
                .collect()
        })
        .unwrap_or_default()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GetEdges;

impl NodeProgram for GetEdges {
    fn name(&self) -> &str {
        "get_edges"
    }

    fn validate(&self, starts: &[Handle], _: &Params) -> Result<(), ProgramError> {
        single_start(self.name(), starts)
    }

    fn step(&self, input: StepInput<'_>) -> StepOutput {
        if input.vertex.is_none() {
            return missing(input.handle);
        }
        let edges = filtered_edges(&input);
        let mut f = Params::new();
        f.insert("edges".into(), json(&edges));
        StepOutput {
            fragment: Some(f),
            hops: Vec::new(),
        }
    }

    fn merge(&self, fragments: Vec<Params>) -> Result<Params, ProgramError> {
        check_missing(&fragments)?;
        Ok(fragments.into_iter().next().unwrap_or_default())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CountEdges;

impl NodeProgram for CountEdges {
    fn name(&self) -> &str {
        "count_edges"
    }

    fn validate(&self, starts: &[Handle], _: &Params) -> Result<(), ProgramError> {
        single_start(self.name(), starts)
    }

    fn step(&self, input: StepInput<'_>) -> StepOutput {
        if input.vertex.is_none() {
            return missing(input.handle);
        }
        let mut f = Params::new();
        f.insert("count".into(), filtered_edges(&input).len().to_string());
        StepOutput {
            fragment: Some(f),
            hops: Vec::new(),
        }
    }

    fn merge(&self, fragments: Vec<Params>) -> Result<Params, ProgramError> {
        check_missing(&fragments)?;
        Ok(fragments.into_iter().next().unwrap_or_default())
    }
}

/// Local clustering coefficient over distinct out-neighbours:
/// links among them divided by d·(d−1).
#[derive(Debug, Clone, Copy, Default)]
pub struct ClusteringCoefficient;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl NodeProgram for ClusteringCoefficient {
    fn name(&self) -> &str {
        "clustering_coefficient"
    }

    fn validate(&self, starts: &[Handle], _: &Params) -> Result<(), ProgramError> {
        single_start(self.name(), starts)
    }

    fn step(&self, input: StepInput<'_>) -> StepOutput {
        let Some(v) = input.vertex else {
            if input.params.contains_key("origin") {
                let mut f = Params::new();
                f.insert("links".into(), "0".into());
                return StepOutput {
                    fragment: Some(f),
                    hops: Vec::new(),
                };
            }
            return missing(input.handle);
        };
        let targets: BTreeSet<&str> = v.edges.iter().map(|e| e.dst.as_str()).collect();
        if input.params.contains_key("origin") {
            let neighbours: BTreeSet<Handle> =
                parse_list(input.params.get("neighbours")).into_iter().collect();
            let links = targets
                .iter()
                .filter(|w| **w != input.handle && neighbours.contains(**w))
                .count();
            let mut f = Params::new();
            f.insert("links".into(), links.to_string());
            return StepOutput {
                fragment: Some(f),
                hops: Vec::new(),
            };
        }
        let neighbours: Vec<Handle> = targets
            .iter()
            .filter(|w| **w != input.handle)
            .map(|w| w.to_string())
            .collect();
        let mut f = Params::new();
        f.insert("degree".into(), neighbours.len().to_string());
        let mut hops = Vec::new();
        if neighbours.len() >= 2 {
            let mut p = Params::new();
            p.insert("origin".into(), input.handle.to_owned());
            p.insert("neighbours".into(), json(&neighbours));
            for n in &neighbours {
                hops.push((n.clone(), p.clone()));
            }
        }
        StepOutput {
            fragment: Some(f),
            hops,
        }
    }

    fn merge(&self, fragments: Vec<Params>) -> Result<Params, ProgramError> {
        check_missing(&fragments)?;
        let mut degree = 0u64;
        let mut links = 0u64;
        for f in &fragments {
            if let Some(d) = f.get("degree") {
                degree = d.parse().unwrap_or(0);
            }
            if let Some(l) = f.get("links") {
                links += l.parse::<u64>().unwrap_or(0);
            }
        }
        let (num, den) = if degree < 2 || links == 0 {
            (0, 1)
        } else {
            let den = degree * (degree - 1);
            let g = gcd(links, den);
            (links / g, den / g)
        };
        let mut out = Params::new();
        out.insert("numerator".into(), num.to_string());
        out.insert("denominator".into(), den.to_string());
        out.insert("coefficient".into(), format!("{num}/{den}"));
        Ok(out)
    }
}

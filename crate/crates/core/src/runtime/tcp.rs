//! TCP transport.
//!
//! Servers listen on addresses from an [`AddressBook`]. A connection starts
//! with a `HELLO` frame naming the sender, then carries frames in one
//! direction. Clients have no listening address, so a server answers them on
//! the connection the client opened.
//!
//! The oracle and the backing store are not actors; [`serve_services`]
//! answers their request/response calls and [`RemoteOracle`] and
//! [`RemoteStore`] are the matching clients.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Sender};

use super::threaded::{spawn_host, reply_corr, Clock, Envelope, HostHandle, Router};
use super::Actor;
use crate::client::{ClientError, Transport};
use crate::messages::{Message, NodeId};
use crate::model::{Handle, ShardId, TxOp, VertexRecord};
use crate::oracle::{EventInfo, OrderPreference};
use crate::services::{LocalOracle, LocalStore, OracleService, ServiceError, StoreService};
use crate::store::{CommitResult, StoreAbort};
use crate::timestamp::{Epoch, OrderRelation, VectorTimestamp};
use crate::wire::{
    read_frame, write_frame, Frame, OracleRequest, OracleResponse, StoreRequest, StoreResponse,
    WireError,
};

pub type AddressBook = BTreeMap<NodeId, SocketAddr>;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);

type Conn = Arc<Mutex<BufWriter<TcpStream>>>;

/// Routes actor messages over TCP, opening connections lazily.
pub struct TcpRouter {
    book: AddressBook,
    conns: Mutex<HashMap<NodeId, Conn>>,
}

impl TcpRouter {
    pub fn new(book: AddressBook) -> Arc<Self> {
        Arc::new(TcpRouter {
            book,
            conns: Mutex::new(HashMap::new()),
        })
    }

    fn connect(&self, from: NodeId, to: NodeId) -> Option<Conn> {
        if let Some(c) = self.conns.lock().expect("conns").get(&to) {
            return Some(c.clone());
        }
        let addr = self.book.get(&to)?;
        let stream = TcpStream::connect_timeout(addr, CONNECT_TIMEOUT).ok()?;
        stream.set_nodelay(true).ok()?;
        let mut w = BufWriter::new(stream);
        write_frame(&mut w, &Frame::Hello(from), 0).ok()?;
        let conn = Arc::new(Mutex::new(w));
        self.conns.lock().expect("conns").insert(to, conn.clone());
        Some(conn)
    }

    /// Answers `peer` on a connection it opened to us.
    fn adopt(&self, peer: NodeId, stream: TcpStream) {
        if self.book.contains_key(&peer) {
            return;
        }
        let conn = Arc::new(Mutex::new(BufWriter::new(stream)));
        self.conns.lock().expect("conns").insert(peer, conn);
    }
}

impl Router for TcpRouter {
    fn send(&self, from: NodeId, to: NodeId, msg: Message) {
        let Some(conn) = self.connect(from, to) else {
            return;
        };
        let frame = Frame::Msg(msg);
        let ok = write_frame(&mut *conn.lock().expect("conn"), &frame, 0).is_ok();
        if !ok {
            self.conns.lock().expect("conns").remove(&to);
        }
    }
}

/// A server actor listening on a socket.
pub struct TcpHost {
    pub addr: SocketAddr,
    host: HostHandle,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl TcpHost {
    /// Stops the actor and returns it.
    pub fn shutdown(mut self) -> Box<dyn Actor> {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, CONNECT_TIMEOUT);
        if let Some(t) = self.acceptor.take() {
            let _ = t.join();
        }
        self.host.join()
    }
}

fn accept_loop(
    listener: TcpListener,
    stop: Arc<AtomicBool>,
    mut on_conn: impl FnMut(TcpStream) + Send + 'static,
) -> JoinHandle<()> {
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            if let Ok(s) = stream {
                let _ = s.set_nodelay(true);
                on_conn(s);
            }
        }
    })
}

fn pump(stream: TcpStream, router: Arc<TcpRouter>, inbox: Sender<Envelope>) {
    std::thread::spawn(move || {
        let Ok(write_half) = stream.try_clone() else {
            return;
        };
        let mut r = BufReader::new(stream);
        let peer = match read_frame(&mut r) {
            Ok((Frame::Hello(p), _)) => p,
            _ => return,
        };
        router.adopt(peer, write_half);
        while let Ok((frame, _)) = read_frame(&mut r) {
            if let Frame::Msg(msg) = frame {
                if inbox.send(Envelope::Deliver { from: peer, msg }).is_err() {
                    break;
                }
            }
        }
    });
}

/// Runs `actor` as `node`, listening on `listener`.
pub fn serve_actor(
    node: NodeId,
    actor: Box<dyn Actor>,
    listener: TcpListener,
    book: AddressBook,
) -> std::io::Result<TcpHost> {
    let addr = listener.local_addr()?;
    let router = TcpRouter::new(book);
    let (tx, rx) = unbounded();
    let stop = Arc::new(AtomicBool::new(false));
    let r = router.clone();
    let acceptor = accept_loop(listener, stop.clone(), move |s| pump(s, r.clone(), tx.clone()));
    let host = spawn_host(node, actor, rx, router as Arc<dyn Router>, Clock::new(), None);
    Ok(TcpHost {
        addr,
        host,
        stop,
        acceptor: Some(acceptor),
    })
}

fn oracle_reply(oracle: &LocalOracle, req: OracleRequest) -> OracleResponse {
    let mut host = oracle.lock();
    match req {
        OracleRequest::CreateEvent(id, info) => {
            host.oracle.create_event_with(id, info);
            OracleResponse::Ack
        }
        OracleRequest::AssignOrder(before, after) => match host.oracle.assign_order(&before, &after) {
            Ok(()) => OracleResponse::Ack,
            Err(e) => OracleResponse::Failed(e),
        },
        OracleRequest::QueryOrder(a, b) => match host.oracle.query_order(&a, &b) {
            Ok(o) => OracleResponse::Order(o),
            Err(e) => OracleResponse::Failed(e),
        },
        OracleRequest::OrderOrAssign(pairs, pref) => match host.oracle.order_or_assign(&pairs, pref) {
            Ok(r) => OracleResponse::Relations(r),
            Err(e) => OracleResponse::Failed(e),
        },
        OracleRequest::GcEvents(t) => OracleResponse::Removed(host.oracle.gc_events(&t) as u64),
        OracleRequest::ReportWatermark(n, e, w) => {
            host.report(n, e, &w);
            OracleResponse::Ack
        }
    }
}

fn store_reply(store: &LocalStore, req: StoreRequest) -> Result<StoreResponse, String> {
    Ok(match req {
        StoreRequest::Execute { ops, reads, ts } => {
            StoreResponse::Executed(store.execute(&ops, &reads, &ts).map_err(|e| e.to_string())?)
        }
        StoreRequest::GetVertex(h) => {
            let (rec, v) = store.get_vertex(&h).map_err(|e| e.to_string())?;
            StoreResponse::Vertex(rec, v)
        }
        StoreRequest::GetShard(h) => StoreResponse::Shard(store.get_shard(&h).map_err(|e| e.to_string())?),
        StoreRequest::RestoreShard(s) => {
            StoreResponse::Records(store.restore_shard(s).map_err(|e| e.to_string())?)
        }
        StoreRequest::CommitIndex => StoreResponse::Index(store.commit_index().map_err(|e| e.to_string())?),
    })
}

/// A running oracle and/or store endpoint.
pub struct ServiceHost {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServiceHost {
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, CONNECT_TIMEOUT);
        if let Some(t) = self.acceptor.take() {
            let _ = t.join();
        }
    }
}

/// Answers oracle and store calls on `listener`. Each connection is served
/// by its own thread; calls on one connection are answered in order.
pub fn serve_services(
    listener: TcpListener,
    oracle: Option<LocalOracle>,
    store: Option<LocalStore>,
) -> std::io::Result<ServiceHost> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let acceptor = accept_loop(listener, stop.clone(), move |stream| {
        let oracle = oracle.clone();
        let store = store.clone();
        std::thread::spawn(move || {
            let Ok(w) = stream.try_clone() else {
                return;
            };
            let mut r = BufReader::new(stream);
            let mut w = BufWriter::new(w);
            while let Ok((frame, corr)) = read_frame(&mut r) {
                let reply = match (frame, &oracle, &store) {
                    (Frame::Hello(_), _, _) => continue,
                    (Frame::Oracle(req), Some(o), _) => Frame::OracleReply(oracle_reply(o, req)),
                    (Frame::Store(req), _, Some(s)) => match store_reply(s, req) {
                        Ok(resp) => Frame::StoreReply(resp),
                        Err(e) => Frame::Error(e),
                    },
                    _ => Frame::Error("unsupported request".into()),
                };
                if write_frame(&mut w, &reply, corr).is_err() {
                    break;
                }
            }
        });
    });
    Ok(ServiceHost {
        addr,
        stop,
        acceptor: Some(acceptor),
    })
}

/// One blocking request/response connection, reopened after errors.
struct Rpc {
    addr: SocketAddr,
    timeout: Duration,
    conn: Mutex<Option<(BufReader<TcpStream>, BufWriter<TcpStream>)>>,
    corr: AtomicU64,
}

impl Rpc {
    fn new(addr: SocketAddr) -> Self {
        Rpc {
            addr,
            timeout: Duration::from_secs(5),
            conn: Mutex::new(None),
            corr: AtomicU64::new(1),
        }
    }

    fn open(&self) -> Result<(BufReader<TcpStream>, BufWriter<TcpStream>), WireError> {
        let s = TcpStream::connect_timeout(&self.addr, CONNECT_TIMEOUT)?;
        s.set_nodelay(true)?;
        s.set_read_timeout(Some(self.timeout))?;
        Ok((BufReader::new(s.try_clone()?), BufWriter::new(s)))
    }

    fn call(&self, frame: Frame) -> Result<Frame, ServiceError> {
        let corr = self.corr.fetch_add(1, Ordering::Relaxed);
        let mut guard = self.conn.lock().expect("rpc");
        let unreachable = |e: WireError| ServiceError::Unreachable(format!("{}: {e}", self.addr));
        if guard.is_none() {
            *guard = Some(self.open().map_err(unreachable)?);
        }
        let (r, w) = guard.as_mut().expect("connected");
        let result = write_frame(w, &frame, corr).and_then(|()| read_frame(r));
        match result {
            Ok((reply, c)) if c == corr => Ok(reply),
            Ok(_) => {
                *guard = None;
                Err(ServiceError::Unreachable("correlation mismatch".into()))
            }
            Err(e) => {
                *guard = None;
                Err(unreachable(e))
            }
        }
    }
}

pub struct RemoteOracle {
    rpc: Rpc,
}

impl RemoteOracle {
    pub fn new(addr: SocketAddr) -> Self {
        RemoteOracle { rpc: Rpc::new(addr) }
    }

    fn call(&self, req: OracleRequest) -> Result<OracleResponse, ServiceError> {
        match self.rpc.call(Frame::Oracle(req))? {
            Frame::OracleReply(OracleResponse::Failed(e)) => Err(e.into()),
            Frame::OracleReply(r) => Ok(r),
            Frame::Error(e) => Err(ServiceError::Unreachable(e)),
            other => Err(ServiceError::Unreachable(format!("unexpected reply {other:?}"))),
        }
    }
}

impl OracleService for RemoteOracle {
    fn create_event(&self, id: &VectorTimestamp, info: EventInfo) -> Result<(), ServiceError> {
        self.call(OracleRequest::CreateEvent(id.clone(), info)).map(|_| ())
    }

    fn order_or_assign(
        &self,
        pairs: &[(VectorTimestamp, VectorTimestamp)],
        pref: OrderPreference,
    ) -> Result<Vec<OrderRelation>, ServiceError> {
        match self.call(OracleRequest::OrderOrAssign(pairs.to_vec(), pref))? {
            OracleResponse::Relations(r) if r.len() == pairs.len() => Ok(r),
            other => Err(ServiceError::Unreachable(format!("unexpected reply {other:?}"))),
        }
    }

    fn report_watermark(
        &self,
        reporter: NodeId,
        epoch: Epoch,
        watermark: &VectorTimestamp,
    ) -> Result<(), ServiceError> {
        self.call(OracleRequest::ReportWatermark(reporter, epoch, watermark.clone()))
            .map(|_| ())
    }
}

pub struct RemoteStore {
    rpc: Rpc,
}

impl RemoteStore {
    pub fn new(addr: SocketAddr) -> Self {
        RemoteStore { rpc: Rpc::new(addr) }
    }

    fn call(&self, req: StoreRequest) -> Result<StoreResponse, ServiceError> {
        match self.rpc.call(Frame::Store(req))? {
            Frame::StoreReply(r) => Ok(r),
            Frame::Error(e) => Err(ServiceError::Store(e)),
            other => Err(ServiceError::Unreachable(format!("unexpected reply {other:?}"))),
        }
    }
}

fn unexpected<T>(r: StoreResponse) -> Result<T, ServiceError> {
    Err(ServiceError::Unreachable(format!("unexpected reply {r:?}")))
}

impl StoreService for RemoteStore {
    fn execute(
        &self,
        ops: &[TxOp],
        reads: &[(Handle, u64)],
        ts: &VectorTimestamp,
    ) -> Result<Result<CommitResult, StoreAbort>, ServiceError> {
        match self.call(StoreRequest::Execute {
            ops: ops.to_vec(),
            reads: reads.to_vec(),
            ts: ts.clone(),
        })? {
            StoreResponse::Executed(r) => Ok(r),
            r => unexpected(r),
        }
    }

    fn get_vertex(&self, h: &str) -> Result<(Option<VertexRecord>, u64), ServiceError> {
        match self.call(StoreRequest::GetVertex(h.to_string()))? {
            StoreResponse::Vertex(rec, v) => Ok((rec, v)),
            r => unexpected(r),
        }
    }

    fn get_shard(&self, h: &str) -> Result<Option<ShardId>, ServiceError> {
        match self.call(StoreRequest::GetShard(h.to_string()))? {
            StoreResponse::Shard(s) => Ok(s),
            r => unexpected(r),
        }
    }

    fn restore_shard(&self, shard: ShardId) -> Result<Vec<VertexRecord>, ServiceError> {
        match self.call(StoreRequest::RestoreShard(shard))? {
            StoreResponse::Records(r) => Ok(r),
            r => unexpected(r),
        }
    }

    fn commit_index(&self) -> Result<u64, ServiceError> {
        match self.call(StoreRequest::CommitIndex)? {
            StoreResponse::Index(i) => Ok(i),
            r => unexpected(r),
        }
    }
}

/// Client side of the gatekeeper protocol over TCP.
pub struct TcpTransport {
    me: NodeId,
    book: AddressBook,
    conns: HashMap<NodeId, (BufReader<TcpStream>, BufWriter<TcpStream>)>,
}

impl TcpTransport {
    pub fn new(me: NodeId, book: AddressBook) -> Self {
        TcpTransport {
            me,
            book,
            conns: HashMap::new(),
        }
    }

    fn conn(
        &mut self,
        to: NodeId,
    ) -> Result<&mut (BufReader<TcpStream>, BufWriter<TcpStream>), ClientError> {
        if !self.conns.contains_key(&to) {
            let addr = self
                .book
                .get(&to)
                .ok_or_else(|| ClientError::Transport(format!("no address for {to}")))?;
            let s = TcpStream::connect_timeout(addr, CONNECT_TIMEOUT)
                .map_err(|e| ClientError::Transport(format!("{to}: {e}")))?;
            let _ = s.set_nodelay(true);
            let r = s
                .try_clone()
                .map_err(|e| ClientError::Transport(e.to_string()))?;
            let mut w = BufWriter::new(s);
            write_frame(&mut w, &Frame::Hello(self.me), 0)
                .map_err(|e| ClientError::Transport(e.to_string()))?;
            self.conns.insert(to, (BufReader::new(r), w));
        }
        Ok(self.conns.get_mut(&to).expect("inserted"))
    }
}

impl Transport for TcpTransport {
    fn call(
        &mut self,
        to: NodeId,
        corr: u64,
        msg: Message,
        timeout: Duration,
    ) -> Result<Message, ClientError> {
        let deadline = Instant::now() + timeout;
        let result = (|| {
            let (r, w) = self.conn(to)?;
            write_frame(w, &Frame::Msg(msg), corr).map_err(|e| ClientError::Transport(e.to_string()))?;
            loop {
                let left = deadline.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    return Err(ClientError::Transport(format!("no reply from {to} within {timeout:?}")));
                }
                r.get_ref()
                    .set_read_timeout(Some(left))
                    .map_err(|e| ClientError::Transport(e.to_string()))?;
                match read_frame(r) {
                    Ok((Frame::Msg(m), _)) if reply_corr(&m) == Some(corr) => return Ok(m),
                    Ok(_) => {}
                    Err(e) => return Err(ClientError::Transport(e.to_string())),
                }
            }
        })();
        if result.is_err() {
            self.conns.remove(&to);
        }
        result
    }
}

/// Binds an ephemeral localhost port.
pub fn ephemeral() -> std::io::Result<TcpListener> {
    TcpListener::bind("127.0.0.1:0")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{EventKind, TimelineOracle};
    use crate::services::OracleHost;
    use crate::store::BackingStore;

    #[test]
    fn remote_services_roundtrip() {
        let oracle = LocalOracle::new(OracleHost::new(TimelineOracle::new(), 1, false));
        let store = LocalStore::new(BackingStore::in_memory(2));
        let host = serve_services(ephemeral().unwrap(), Some(oracle.clone()), Some(store)).unwrap();

        let ro = RemoteOracle::new(host.addr);
        let a = VectorTimestamp::new(0, 0, vec![1, 0]);
        let b = VectorTimestamp::new(0, 1, vec![0, 1]);
        for (t, n) in [(&a, 1), (&b, 2)] {
            ro.create_event(t, EventInfo { kind: EventKind::Transaction, arrival: n })
                .unwrap();
        }
        let rel = ro
            .order_or_assign(&[(a.clone(), b.clone())], OrderPreference::ArrivalOrder)
            .unwrap();
        assert_eq!(rel, vec![OrderRelation::Before]);
        assert_eq!(oracle.lock().oracle.event_count(), 2);

        let rs = RemoteStore::new(host.addr);
        let ts = VectorTimestamp::new(0, 0, vec![2, 0]);
        let c = rs
            .execute(&[TxOp::CreateVertex { handle: "v".into() }], &[], &ts)
            .unwrap()
            .unwrap();
        assert_eq!(rs.commit_index().unwrap(), c.index);
        assert!(rs.get_vertex("v").unwrap().0.is_some());
        assert!(rs.get_shard("nope").unwrap().is_none());
        host.shutdown();
    }
}

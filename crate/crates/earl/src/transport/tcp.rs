//! Full-mesh TCP execution of dispatch plans.
//!
//! Every worker connects to every lower-numbered worker and accepts from
//! every higher-numbered one, identifying itself with a hello frame. A
//! dedicated reader thread per peer drains incoming frames into a shared
//! inbox, so bulk sends can never deadlock against unread inbound data.
//!
//! A plan executes phase by phase: each worker streams its outgoing
//! segments, claims its expected inbound segments from the inbox, then
//! joins a barrier (all workers report to the lowest-numbered session
//! member, which releases them). Phase wall-clock time runs from first
//! send to barrier release, so the slowest worker paces everyone, the
//! way the analytic model assumes. Hello, done, and error frames are
//! control traffic and carry no row data.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::dispatch::{DispatchPlan, RowStore, TransferSegment};
use crate::model::WorkerId;
use crate::transport::wire::{self, Frame, FrameHeader, FrameType, WireError};

const HELLO_TAG: &str = "@hello";
const BARRIER_TAG: &str = "@barrier";
const CONNECT_RETRY: Duration = Duration::from_millis(25);
const ACCEPT_POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("no address for worker {0} in the peer book")]
    UnknownPeer(WorkerId),
    #[error("invalid peer address {addr}: {reason}")]
    BadAddress { addr: String, reason: String },
    #[error("bind {addr} failed: {source}")]
    Bind { addr: SocketAddr, source: io::Error },
    #[error("connect to worker {peer} at {addr} failed after {waited:?}: {reason}")]
    Connect {
        peer: WorkerId,
        addr: SocketAddr,
        waited: Duration,
        reason: String,
    },
    #[error("handshake failed: {reason}")]
    Handshake { reason: String },
    #[error("io with worker {peer}: {source}")]
    PeerIo { peer: WorkerId, source: io::Error },
    #[error("worker {peer} ended the session: {reason}")]
    PeerClosed { peer: WorkerId, reason: String },
    #[error("worker {from} reported: {message}")]
    Remote { from: WorkerId, message: String },
    #[error("step {step_id} tensor {tensor}: unexpected segment {src}->{dst} rows [{start}, {end})")]
    UnexpectedSegment {
        step_id: u64,
        tensor: String,
        src: WorkerId,
        dst: WorkerId,
        start: u64,
        end: u64,
    },
    #[error("step {step_id} tensor {tensor}: segment {src}->{dst} announced {got} bytes per row, plan says {want}")]
    RowBytesMismatch {
        step_id: u64,
        tensor: String,
        src: WorkerId,
        dst: WorkerId,
        want: u64,
        got: u64,
    },
    #[error("step {step_id} tensor {tensor}: timed out waiting for segments [{missing}]")]
    MissingSegments {
        step_id: u64,
        tensor: String,
        missing: String,
    },
    #[error("step {step_id} tensor {tensor}: row {row} not resident for send to worker {dst}")]
    MissingLocalRow {
        step_id: u64,
        tensor: String,
        row: u64,
        dst: WorkerId,
    },
    #[error("step {step_id} tensor {tensor}: row {row} holds {got} bytes, plan says {want}")]
    LocalRowSize {
        step_id: u64,
        tensor: String,
        row: u64,
        want: u64,
        got: u64,
    },
    #[error("segment {src}->{dst} rows [{start}, {end}) carries {bytes} bytes, not evenly divisible")]
    NonUniformSegment {
        src: WorkerId,
        dst: WorkerId,
        start: u64,
        end: u64,
        bytes: u64,
    },
    #[error("barrier {seq} timed out; missing workers {missing:?}")]
    BarrierTimeout { seq: u64, missing: Vec<WorkerId> },
    #[error("wire protocol violation from worker {peer}: {source}")]
    Wire { peer: WorkerId, source: WireError },
}

/// Worker id to socket address map for one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerBook {
    addrs: BTreeMap<WorkerId, SocketAddr>,
}

impl PeerBook {
    pub fn new(addrs: BTreeMap<WorkerId, SocketAddr>) -> Self {
        PeerBook { addrs }
    }

    /// Index in the list is the worker id.
    pub fn from_strings(peers: &[String]) -> Result<Self, TransportError> {
        let mut addrs = BTreeMap::new();
        for (i, s) in peers.iter().enumerate() {
            let addr = s.parse().map_err(|e| TransportError::BadAddress {
                addr: s.clone(),
                reason: format!("{e}"),
            })?;
            addrs.insert(i as WorkerId, addr);
        }
        Ok(PeerBook { addrs })
    }

    pub fn addr(&self, w: WorkerId) -> Option<SocketAddr> {
        self.addrs.get(&w).copied()
    }

    pub fn worker_ids(&self) -> Vec<WorkerId> {
        self.addrs.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.addrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addrs.is_empty()
    }
}

/// Binds `n` loopback listeners on ephemeral ports and returns the
/// matching book; worker `i` owns listener `i`.
pub fn ephemeral_local_book(n: u32) -> io::Result<(PeerBook, Vec<TcpListener>)> {
    let mut addrs = BTreeMap::new();
    let mut listeners = Vec::with_capacity(n as usize);
    for i in 0..n {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        addrs.insert(i, listener.local_addr()?);
        listeners.push(listener);
    }
    Ok((PeerBook::new(addrs), listeners))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TcpOptions {
    pub connect_timeout: Duration,
    pub io_timeout: Duration,
    pub barrier_timeout: Duration,
}

impl Default for TcpOptions {
    fn default() -> Self {
        TcpOptions {
            connect_timeout: Duration::from_secs(10),
            io_timeout: Duration::from_secs(30),
            barrier_timeout: Duration::from_secs(30),
        }
    }
}

struct DataMsg {
    step_id: u64,
    tensor: String,
    src: WorkerId,
    row_start: u64,
    row_end: u64,
    row_bytes: u64,
    payload: Vec<u8>,
}

#[derive(Clone)]
enum PeerEnd {
    Done,
    Closed(String),
}

#[derive(Default)]
struct InboxState {
    data: Vec<DataMsg>,
    barriers: BTreeMap<u64, BTreeSet<WorkerId>>,
    finished: BTreeMap<WorkerId, PeerEnd>,
    remote_error: Option<(WorkerId, String)>,
}

struct Inbox {
    state: Mutex<InboxState>,
    cv: Condvar,
}

/// An established full-mesh session.
pub struct TcpSession {
    my_id: WorkerId,
    coordinator: WorkerId,
    peers: Vec<WorkerId>,
    writers: BTreeMap<WorkerId, BufWriter<TcpStream>>,
    raw: BTreeMap<WorkerId, TcpStream>,
    inbox: Arc<Inbox>,
    handles: Vec<JoinHandle<()>>,
    barrier_seq: u64,
    opts: TcpOptions,
}

impl TcpSession {
    /// Binds this worker's address from the book and meshes with every
    /// other book member.
    pub fn establish(
        my_id: WorkerId,
        book: &PeerBook,
        opts: TcpOptions,
    ) -> Result<Self, TransportError> {
        let addr = book.addr(my_id).ok_or(TransportError::UnknownPeer(my_id))?;
        let listener =
            TcpListener::bind(addr).map_err(|source| TransportError::Bind { addr, source })?;
        Self::establish_with_listener(my_id, book, listener, opts)
    }

    /// Meshes using an already-bound listener (its address may differ
    /// from the book entry, e.g. when listening on a wildcard address).
    pub fn establish_with_listener(
        my_id: WorkerId,
        book: &PeerBook,
        listener: TcpListener,
        opts: TcpOptions,
    ) -> Result<Self, TransportError> {
        let all = book.worker_ids();
        if !all.contains(&my_id) {
            return Err(TransportError::UnknownPeer(my_id));
        }
        let peers: Vec<WorkerId> = all.iter().copied().filter(|&w| w != my_id).collect();
        let coordinator = *all.first().expect("book contains my_id");
        let higher: BTreeSet<WorkerId> = peers.iter().copied().filter(|&w| w > my_id).collect();
        let lower: Vec<WorkerId> = peers.iter().copied().filter(|&w| w < my_id).collect();

        let acceptor = {
            let expected = higher.clone();
            let deadline = Instant::now() + opts.connect_timeout;
            let hello_timeout = opts.connect_timeout;
            thread::spawn(move || accept_higher(listener, expected, deadline, hello_timeout))
        };

        let mut streams: Vec<(WorkerId, TcpStream)> = Vec::with_capacity(peers.len());
        let mut connect_error = None;
        for &peer in &lower {
            match connect_one(my_id, peer, book, opts.connect_timeout) {
                Ok(stream) => streams.push((peer, stream)),
                Err(e) => {
                    connect_error = Some(e);
                    break;
                }
            }
        }
        let accepted = acceptor
            .join()
            .map_err(|_| TransportError::Handshake {
                reason: "acceptor thread panicked".into(),
            })?;
        if let Some(e) = connect_error {
            return Err(e);
        }
        streams.extend(accepted?);

        let inbox = Arc::new(Inbox {
            state: Mutex::new(InboxState::default()),
            cv: Condvar::new(),
        });
        let mut writers = BTreeMap::new();
        let mut raw = BTreeMap::new();
        let mut handles = Vec::with_capacity(streams.len());
        for (peer, stream) in streams {
            let err = |source| TransportError::PeerIo { peer, source };
            stream.set_nodelay(true).map_err(err)?;
            stream.set_read_timeout(None).map_err(err)?;
            stream
                .set_write_timeout(Some(opts.io_timeout))
                .map_err(err)?;
            let reader = stream.try_clone().map_err(err)?;
            raw.insert(peer, stream.try_clone().map_err(err)?);
            let inbox_ref = Arc::clone(&inbox);
            handles.push(thread::spawn(move || reader_loop(peer, reader, inbox_ref)));
            writers.insert(peer, BufWriter::new(stream));
        }
        Ok(TcpSession {
            my_id,
            coordinator,
            peers,
            writers,
            raw,
            inbox,
            handles,
            barrier_seq: 0,
            opts,
        })
    }

    pub fn my_id(&self) -> WorkerId {
        self.my_id
    }

    pub fn peer_ids(&self) -> &[WorkerId] {
        &self.peers
    }

    fn writer(&mut self, peer: WorkerId) -> Result<&mut BufWriter<TcpStream>, TransportError> {
        self.writers
            .get_mut(&peer)
            .ok_or(TransportError::UnknownPeer(peer))
    }

    fn send_frame(&mut self, peer: WorkerId, frame: &Frame) -> Result<(), TransportError> {
        let w = self.writer(peer)?;
        frame.write_to(w).map_err(|e| wire_to_peer_io(peer, e))?;
        w.flush()
            .map_err(|source| TransportError::PeerIo { peer, source })?;
        Ok(())
    }

    /// Aligns all session members. Everyone reports to the coordinator,
    /// which releases them once all reports are in.
    pub fn barrier(&mut self) -> Result<(), TransportError> {
        let seq = self.barrier_seq;
        self.barrier_seq += 1;
        if self.peers.is_empty() {
            return Ok(());
        }
        let deadline = Instant::now() + self.opts.barrier_timeout;
        if self.my_id == self.coordinator {
            let followers: BTreeSet<WorkerId> = self.peers.iter().copied().collect();
            self.await_barrier_members(seq, &followers, deadline)?;
            for &peer in &self.peers.clone() {
                let frame = Frame::barrier(seq, BARRIER_TAG, self.my_id, peer);
                self.send_frame(peer, &frame)?;
            }
        } else {
            let frame = Frame::barrier(seq, BARRIER_TAG, self.my_id, self.coordinator);
            self.send_frame(self.coordinator, &frame)?;
            let coordinator = BTreeSet::from([self.coordinator]);
            self.await_barrier_members(seq, &coordinator, deadline)?;
        }
        self.inbox.state.lock().unwrap().barriers.remove(&seq);
        Ok(())
    }

    fn await_barrier_members(
        &self,
        seq: u64,
        members: &BTreeSet<WorkerId>,
        deadline: Instant,
    ) -> Result<(), TransportError> {
        let mut st = self.inbox.state.lock().unwrap();
        loop {
            if let Some((from, message)) = st.remote_error.clone() {
                return Err(TransportError::Remote { from, message });
            }
            let present = st.barriers.get(&seq);
            let missing: Vec<WorkerId> = members
                .iter()
                .copied()
                .filter(|w| !present.is_some_and(|s| s.contains(w)))
                .collect();
            if missing.is_empty() {
                return Ok(());
            }
            for &w in &missing {
                if let Some(end) = st.finished.get(&w) {
                    return Err(peer_end_error(w, end));
                }
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(TransportError::BarrierTimeout { seq, missing });
            }
            let (guard, _) = self
                .inbox
                .cv
                .wait_timeout(st, deadline - now)
                .expect("inbox lock poisoned");
            st = guard;
        }
    }

    /// Executes one plan against the local row store, returning per-phase
    /// wall-clock durations. Rows sent away leave the store; rows
    /// received enter it, so after a full plan the store holds exactly
    /// this worker's destination rows.
    pub fn execute_plan(
        &mut self,
        step_id: u64,
        tensor: &str,
        plan: &DispatchPlan,
        store: &mut RowStore,
    ) -> Result<Vec<Duration>, TransportError> {
        let mut durations = Vec::with_capacity(plan.phases.len());
        let me = self.my_id;
        for phase in &plan.phases {
            let started = Instant::now();
            let mut sent_rows: Vec<u64> = Vec::new();
            for seg in phase.iter().filter(|s| s.src == me && s.dst != me) {
                self.send_segment(step_id, tensor, seg, store, &mut sent_rows)?;
            }
            for row in sent_rows {
                store.remove(&row);
            }
            let expected: Vec<&TransferSegment> = phase
                .iter()
                .filter(|s| s.dst == me && s.src != me)
                .collect();
            self.claim_segments(step_id, tensor, &expected, store)?;
            self.barrier()?;
            durations.push(started.elapsed());
        }
        Ok(durations)
    }

    fn send_segment(
        &mut self,
        step_id: u64,
        tensor: &str,
        seg: &TransferSegment,
        store: &RowStore,
        sent_rows: &mut Vec<u64>,
    ) -> Result<(), TransportError> {
        let row_bytes = segment_row_bytes(seg)?;
        let header = FrameHeader {
            step_id,
            tensor_name: tensor.to_string(),
            src: self.my_id,
            dst: seg.dst,
            row_start: seg.rows.start,
            row_end: seg.rows.end,
            row_bytes,
        };
        let prefix = Frame::encode_prefix(FrameType::Data, &header, seg.bytes)
            .map_err(|e| wire_to_peer_io(seg.dst, e))?;
        let peer = seg.dst;
        // Validate rows before any byte hits the wire, so a local error
        // cannot leave a half-written frame behind.
        for row in seg.rows.start..seg.rows.end {
            match store.get(&row) {
                None => {
                    return Err(TransportError::MissingLocalRow {
                        step_id,
                        tensor: tensor.to_string(),
                        row,
                        dst: peer,
                    })
                }
                Some(payload) if payload.len() as u64 != row_bytes => {
                    return Err(TransportError::LocalRowSize {
                        step_id,
                        tensor: tensor.to_string(),
                        row,
                        want: row_bytes,
                        got: payload.len() as u64,
                    })
                }
                Some(_) => {}
            }
        }
        let w = self.writer(peer)?;
        let io_err = |source| TransportError::PeerIo { peer, source };
        w.write_all(&prefix).map_err(io_err)?;
        for row in seg.rows.start..seg.rows.end {
            w.write_all(store.get(&row).expect("validated above"))
                .map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
        sent_rows.extend(seg.rows.start..seg.rows.end);
        Ok(())
    }

    fn claim_segments(
        &mut self,
        step_id: u64,
        tensor: &str,
        expected: &[&TransferSegment],
        store: &mut RowStore,
    ) -> Result<(), TransportError> {
        let mut pending: BTreeMap<(WorkerId, u64, u64), u64> = BTreeMap::new();
        for seg in expected {
            let row_bytes = segment_row_bytes(seg)?;
            pending.insert((seg.src, seg.rows.start, seg.rows.end), row_bytes);
        }
        let deadline = Instant::now() + self.opts.io_timeout;
        let mut st = self.inbox.state.lock().unwrap();
        loop {
            if let Some((from, message)) = st.remote_error.clone() {
                return Err(TransportError::Remote { from, message });
            }
            while !st.data.is_empty() {
                let m = &st.data[0];
                if m.step_id != step_id || m.tensor != tensor {
                    return Err(TransportError::UnexpectedSegment {
                        step_id: m.step_id,
                        tensor: m.tensor.clone(),
                        src: m.src,
                        dst: self.my_id,
                        start: m.row_start,
                        end: m.row_end,
                    });
                }
                let msg = st.data.swap_remove(0);
                let key = (msg.src, msg.row_start, msg.row_end);
                match pending.remove(&key) {
                    Some(want) if want == msg.row_bytes => {
                        accept_rows(store, &msg);
                    }
                    Some(want) => {
                        return Err(TransportError::RowBytesMismatch {
                            step_id,
                            tensor: tensor.to_string(),
                            src: msg.src,
                            dst: self.my_id,
                            want,
                            got: msg.row_bytes,
                        });
                    }
                    None => {
                        return Err(TransportError::UnexpectedSegment {
                            step_id,
                            tensor: tensor.to_string(),
                            src: msg.src,
                            dst: self.my_id,
                            start: msg.row_start,
                            end: msg.row_end,
                        });
                    }
                }
            }
            if pending.is_empty() {
                return Ok(());
            }
            for &(src, _, _) in pending.keys() {
                if let Some(end) = st.finished.get(&src) {
                    return Err(peer_end_error(src, end));
                }
            }
            let now = Instant::now();
            if now >= deadline {
                let missing: Vec<String> = pending
                    .keys()
                    .map(|(src, start, end)| format!("{src}->[{start}, {end})"))
                    .collect();
                return Err(TransportError::MissingSegments {
                    step_id,
                    tensor: tensor.to_string(),
                    missing: missing.join(", "),
                });
            }
            let (guard, _) = self
                .inbox
                .cv
                .wait_timeout(st, deadline - now)
                .expect("inbox lock poisoned");
            st = guard;
        }
    }

    /// Broadcasts an error frame so peers fail fast instead of timing
    /// out. Best effort.
    pub fn send_error(&mut self, message: &str) {
        for peer in self.peers.clone() {
            let frame = Frame::error(self.my_id, peer, message);
            let _ = self.send_frame(peer, &frame);
        }
    }

    /// Graceful teardown: announce done, unblock readers, join them.
    pub fn close(mut self) -> Result<(), TransportError> {
        for peer in self.peers.clone() {
            let frame = Frame::done(self.my_id, peer);
            let _ = self.send_frame(peer, &frame);
        }
        self.teardown();
        Ok(())
    }

    /// Teardown after a failure: tell peers why, then drop the mesh.
    pub fn abort(mut self, message: &str) {
        self.send_error(message);
        self.teardown();
    }

    fn teardown(&mut self) {
        for w in self.writers.values_mut() {
            let _ = w.flush();
        }
        for stream in self.raw.values() {
            let _ = stream.shutdown(Shutdown::Both);
        }
        for handle in self.handles.drain(..) {
            let _ = handle.join();
        }
    }
}

impl Drop for TcpSession {
    fn drop(&mut self) {
        if !self.handles.is_empty() {
            self.teardown();
        }
    }
}

fn segment_row_bytes(seg: &TransferSegment) -> Result<u64, TransportError> {
    let rows = seg.rows.len();
    if rows == 0 || seg.bytes % rows != 0 {
        return Err(TransportError::NonUniformSegment {
            src: seg.src,
            dst: seg.dst,
            start: seg.rows.start,
            end: seg.rows.end,
            bytes: seg.bytes,
        });
    }
    Ok(seg.bytes / rows)
}

fn accept_rows(store: &mut RowStore, msg: &DataMsg) {
    let rb = msg.row_bytes as usize;
    for (i, row) in (msg.row_start..msg.row_end).enumerate() {
        store.insert(row, msg.payload[i * rb..(i + 1) * rb].to_vec());
    }
}

fn peer_end_error(peer: WorkerId, end: &PeerEnd) -> TransportError {
    match end {
        PeerEnd::Done => TransportError::PeerClosed {
            peer,
            reason: "announced done".into(),
        },
        PeerEnd::Closed(reason) => TransportError::PeerClosed {
            peer,
            reason: reason.clone(),
        },
    }
}

fn wire_to_peer_io(peer: WorkerId, e: WireError) -> TransportError {
    match e {
        WireError::Io(source) => TransportError::PeerIo { peer, source },
        other => TransportError::Wire { peer, source: other },
    }
}

fn connect_one(
    my_id: WorkerId,
    peer: WorkerId,
    book: &PeerBook,
    timeout: Duration,
) -> Result<TcpStream, TransportError> {
    let addr = book.addr(peer).ok_or(TransportError::UnknownPeer(peer))?;
    let started = Instant::now();
    loop {
        match TcpStream::connect(addr) {
            Ok(mut stream) => {
                let hello = Frame::barrier(0, HELLO_TAG, my_id, peer);
                hello
                    .write_to(&mut stream)
                    .map_err(|e| wire_to_peer_io(peer, e))?;
                return Ok(stream);
            }
            Err(e) => {
                if started.elapsed() >= timeout {
                    return Err(TransportError::Connect {
                        peer,
                        addr,
                        waited: started.elapsed(),
                        reason: format!("{e}"),
                    });
                }
                thread::sleep(CONNECT_RETRY);
            }
        }
    }
}

fn accept_higher(
    listener: TcpListener,
    mut remaining: BTreeSet<WorkerId>,
    deadline: Instant,
    hello_timeout: Duration,
) -> Result<Vec<(WorkerId, TcpStream)>, TransportError> {
    let mut got = Vec::with_capacity(remaining.len());
    if remaining.is_empty() {
        return Ok(got);
    }
    listener
        .set_nonblocking(true)
        .map_err(|e| TransportError::Handshake {
            reason: format!("listener: {e}"),
        })?;
    while !remaining.is_empty() {
        if Instant::now() >= deadline {
            return Err(TransportError::Handshake {
                reason: format!("timed out waiting for workers {remaining:?} to connect"),
            });
        }
        match listener.accept() {
            Ok((mut stream, addr)) => {
                let fail = |reason: String| TransportError::Handshake { reason };
                stream
                    .set_nonblocking(false)
                    .map_err(|e| fail(format!("{addr}: {e}")))?;
                stream
                    .set_read_timeout(Some(hello_timeout))
                    .map_err(|e| fail(format!("{addr}: {e}")))?;
                let frame = wire::read_frame(&mut stream)
                    .map_err(|e| fail(format!("{addr}: hello: {e}")))?
                    .ok_or_else(|| fail(format!("{addr}: closed before hello")))?;
                let valid = frame.frame_type == FrameType::Barrier
                    && frame.header.tensor_name == HELLO_TAG;
                if !valid {
                    return Err(fail(format!("{addr}: first frame is not a hello")));
                }
                let peer = frame.header.src;
                if !remaining.remove(&peer) {
                    return Err(fail(format!(
                        "{addr}: unexpected or duplicate worker id {peer}"
                    )));
                }
                got.push((peer, stream));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(e) => {
                return Err(TransportError::Handshake {
                    reason: format!("accept: {e}"),
                })
            }
        }
    }
    Ok(got)
}

fn reader_loop(peer: WorkerId, mut stream: TcpStream, inbox: Arc<Inbox>) {
    let end = loop {
        match wire::read_frame(&mut stream) {
            Ok(None) => break PeerEnd::Closed("connection closed".into()),
            Ok(Some(frame)) => {
                let mut st = inbox.state.lock().unwrap();
                match frame.frame_type {
                    FrameType::Data => {
                        if frame.header.src != peer {
                            break PeerEnd::Closed(format!(
                                "data frame claims src {} on worker {peer}'s connection",
                                frame.header.src
                            ));
                        }
                        st.data.push(DataMsg {
                            step_id: frame.header.step_id,
                            tensor: frame.header.tensor_name,
                            src: peer,
                            row_start: frame.header.row_start,
                            row_end: frame.header.row_end,
                            row_bytes: frame.header.row_bytes,
                            payload: frame.payload,
                        });
                    }
                    FrameType::Barrier => {
                        st.barriers
                            .entry(frame.header.step_id)
                            .or_default()
                            .insert(peer);
                    }
                    FrameType::Done => {
                        drop(st);
                        break PeerEnd::Done;
                    }
                    FrameType::Error => {
                        let message = String::from_utf8_lossy(&frame.payload).into_owned();
                        st.remote_error.get_or_insert((peer, message));
                        drop(st);
                        break PeerEnd::Closed("sent an error frame".into());
                    }
                }
                inbox.cv.notify_all();
            }
            Err(e) => break PeerEnd::Closed(format!("{e}")),
        }
    };
    let mut st = inbox.state.lock().unwrap();
    st.finished.insert(peer, end);
    drop(st);
    inbox.cv.notify_all();
}

/// One-shot convenience: mesh up, run a single plan, tear down.
pub fn execute_tcp(
    my_id: WorkerId,
    book: &PeerBook,
    step_id: u64,
    tensor: &str,
    plan: &DispatchPlan,
    store: &mut RowStore,
    opts: TcpOptions,
) -> Result<Vec<Duration>, TransportError> {
    let mut session = TcpSession::establish(my_id, book, opts)?;
    match session.execute_plan(step_id, tensor, plan, store) {
        Ok(durations) => {
            session.close()?;
            Ok(durations)
        }
        Err(e) => {
            session.abort(&e.to_string());
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatch::{
        oracle, place_rows, plan_all_to_all, plan_gather_scatter, row_payload, RowRange,
        ShardLayout,
    };
    use std::sync::atomic::{AtomicU32, Ordering};

    fn quick_opts() -> TcpOptions {
        TcpOptions {
            connect_timeout: Duration::from_secs(5),
            io_timeout: Duration::from_secs(10),
            barrier_timeout: Duration::from_secs(10),
        }
    }

    fn local_store(layout: &ShardLayout, me: WorkerId, row_bytes: u64) -> RowStore {
        let mut store = RowStore::new();
        for (w, range) in layout.assignments() {
            if *w == me {
                for row in range.start..range.end {
                    store.insert(row, row_payload(row, row_bytes));
                }
            }
        }
        store
    }

    fn run_mesh(
        workers: u32,
        plan: &DispatchPlan,
        src: &ShardLayout,
        row_bytes: u64,
    ) -> Vec<RowStore> {
        let (book, listeners) = ephemeral_local_book(workers).unwrap();
        let mut handles = Vec::new();
        for (i, listener) in listeners.into_iter().enumerate() {
            let book = book.clone();
            let plan = plan.clone();
            let src = src.clone();
            handles.push(thread::spawn(move || {
                let mut session = TcpSession::establish_with_listener(
                    i as WorkerId,
                    &book,
                    listener,
                    quick_opts(),
                )
                .unwrap();
                let mut store = local_store(&src, i as WorkerId, row_bytes);
                session
                    .execute_plan(9, "tensor", &plan, &mut store)
                    .unwrap();
                session.close().unwrap();
                store
            }));
        }
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    }

    #[test]
    fn two_worker_transfer_is_bitwise_faithful() {
        let row_bytes = 64 * 1024;
        let src = ShardLayout::all_on(0, 16).unwrap();
        let dst = ShardLayout::block(16, &[0, 1]).unwrap();
        let plan = plan_all_to_all(&src, &dst, row_bytes).unwrap();
        let stores = run_mesh(2, &plan, &src, row_bytes);
        let want = place_rows(&dst, row_bytes, 2);
        assert_eq!(stores[0], want[0]);
        assert_eq!(stores[1], want[1]);
    }

    #[test]
    fn five_worker_mesh_matches_the_oracle_for_both_strategies() {
        let row_bytes = 512;
        let src = ShardLayout::new(vec![
            (1, RowRange::new(0, 7)),
            (3, RowRange::new(7, 19)),
            (2, RowRange::new(19, 24)),
            (4, RowRange::new(24, 32)),
        ])
        .unwrap();
        let dst = ShardLayout::block(32, &[1, 2, 3, 4]).unwrap();
        for plan in [
            plan_all_to_all(&src, &dst, row_bytes).unwrap(),
            plan_gather_scatter(&src, &dst, 0, row_bytes).unwrap(),
        ] {
            let stores = run_mesh(5, &plan, &src, row_bytes);
            let want = place_rows(&dst, row_bytes, 5);
            assert_eq!(stores, want, "strategy {:?}", plan.strategy);
            let moves: usize = plan
                .phases
                .iter()
                .map(|p| oracle::expand_phase(p).len())
                .sum();
            assert!(moves > 0);
        }
    }

    #[test]
    fn barrier_aligns_staggered_workers() {
        let (book, listeners) = ephemeral_local_book(4).unwrap();
        let arrived = Arc::new(AtomicU32::new(0));
        let mut handles = Vec::new();
        for (i, listener) in listeners.into_iter().enumerate() {
            let book = book.clone();
            let arrived = Arc::clone(&arrived);
            handles.push(thread::spawn(move || {
                let mut session = TcpSession::establish_with_listener(
                    i as WorkerId,
                    &book,
                    listener,
                    quick_opts(),
                )
                .unwrap();
                for round in 1..=3u32 {
                    thread::sleep(Duration::from_millis((i as u64) * 20));
                    arrived.fetch_add(1, Ordering::SeqCst);
                    session.barrier().unwrap();
                    assert!(
                        arrived.load(Ordering::SeqCst) >= 4 * round,
                        "worker {i} passed barrier {round} early"
                    );
                }
                session.close().unwrap();
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
    }

    #[test]
    fn absent_worker_times_out_with_names() {
        let (book, mut listeners) = ephemeral_local_book(2).unwrap();
        let l1 = listeners.pop().unwrap();
        let l0 = listeners.pop().unwrap();
        let book2 = book.clone();
        let lagger = thread::spawn(move || {
            let session =
                TcpSession::establish_with_listener(0, &book2, l0, quick_opts()).unwrap();
            // Never joins the barrier; just holds the mesh open.
            thread::sleep(Duration::from_millis(900));
            drop(session);
        });
        let mut session = TcpSession::establish_with_listener(
            1,
            &book,
            l1,
            TcpOptions {
                barrier_timeout: Duration::from_millis(300),
                ..quick_opts()
            },
        )
        .unwrap();
        match session.barrier() {
            Err(TransportError::BarrierTimeout { seq: 0, missing }) => {
                assert_eq!(missing, vec![0]);
            }
            other => panic!("expected barrier timeout naming worker 0, got {other:?}"),
        }
        drop(session);
        lagger.join().unwrap();
    }

    /// Runs worker 1 against a scripted worker 0 that misbehaves after
    /// the handshake; returns worker 1's plan execution outcome.
    fn run_against_fake(
        fake: impl FnOnce(TcpStream) + Send + 'static,
    ) -> Result<Vec<Duration>, TransportError> {
        let (book, mut listeners) = ephemeral_local_book(2).unwrap();
        let l1 = listeners.pop().unwrap();
        let l0 = listeners.pop().unwrap();

        let fake_side = thread::spawn(move || {
            let (mut stream, _) = l0.accept().unwrap();
            wire::read_frame(&mut stream).unwrap().expect("hello");
            fake(stream);
        });

        let src = ShardLayout::all_on(0, 2).unwrap();
        let dst = ShardLayout::all_on(1, 2).unwrap();
        let plan = plan_all_to_all(&src, &dst, 8).unwrap();
        let mut session = TcpSession::establish_with_listener(
            1,
            &book,
            l1,
            TcpOptions {
                io_timeout: Duration::from_secs(5),
                ..quick_opts()
            },
        )
        .unwrap();
        let mut store = RowStore::new();
        let outcome = session.execute_plan(0, "t", &plan, &mut store);
        drop(session);
        fake_side.join().unwrap();
        outcome
    }

    #[test]
    fn malformed_stream_is_rejected_and_named() {
        let outcome = run_against_fake(|mut stream| {
            stream.write_all(b"XXXX_not_a_frame_at_all_____").unwrap();
            stream.flush().unwrap();
            thread::sleep(Duration::from_millis(400));
        });
        match outcome {
            Err(TransportError::PeerClosed { peer: 0, reason }) => {
                assert!(reason.contains("magic"), "reason: {reason}");
            }
            other => panic!("expected PeerClosed naming worker 0, got {other:?}"),
        }
    }

    #[test]
    fn peer_hangup_mid_plan_surfaces_as_closed() {
        let outcome = run_against_fake(|stream| {
            stream.shutdown(Shutdown::Both).unwrap();
        });
        match outcome {
            Err(TransportError::PeerClosed { peer: 0, reason }) => {
                assert!(reason.contains("closed"), "reason: {reason}");
            }
            other => panic!("expected PeerClosed naming worker 0, got {other:?}"),
        }
    }

    #[test]
    fn remote_error_frame_interrupts_the_claim() {
        let outcome = run_against_fake(|mut stream| {
            let frame = Frame::error(0, 1, "probe failed on purpose");
            frame.write_to(&mut stream).unwrap();
            stream.flush().unwrap();
            thread::sleep(Duration::from_millis(400));
        });
        match outcome {
            Err(TransportError::Remote { from: 0, message }) => {
                assert_eq!(message, "probe failed on purpose");
            }
            other => panic!("expected the remote error, got {other:?}"),
        }
    }
}

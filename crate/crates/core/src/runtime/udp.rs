//! Threaded UDP backend.
//!
//! RX queue `i` is fed by a socket bound to `port_base + i`, which emulates
//! the NIC steering packets by destination port. Multi-datagram PUTs are
//! reassembled before they enter the queue. Each core runs its batch loop on
//! its own thread and hands replies to a transmit thread that sends from the
//! core's port, interleaving the fragments of pending replies one datagram
//! at a time so a long reply cannot hold back short ones.

use std::collections::{HashMap, VecDeque};
use std::io;
use std::net::{IpAddr, SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};
use socket2::{Domain, Protocol, Socket, Type};

use super::{Policy, Reply, ReplyStatus, Request, Server};
use crate::kvstore::KeyHash;
use crate::protocol::{self, Frame, MessageHeader, Opcode, Reassembly, MAX_DATAGRAM};
use crate::shardctl::{Controller, ShardPlan};

const POLL: Duration = Duration::from_millis(20);

/// Error codes carried in the single payload byte of an ERROR reply.
pub const ERR_NOT_FOUND: u8 = 1;
pub const ERR_FAILED: u8 = 2;

/// Datagrams of a request, fragmenting PUT values as needed.
pub fn encode_request(req: &Request, max_datagram: usize) -> Result<Vec<Vec<u8>>, protocol::ProtocolError> {
    let h = MessageHeader::request(req.op, req.id, req.sent_ns, req.hash.0);
    protocol::encode_message(&h, &req.key, &req.value, max_datagram)
}

/// Datagrams of a reply.
pub fn encode_reply(reply: &Reply, max_datagram: usize) -> Result<Vec<Vec<u8>>, protocol::ProtocolError> {
    let h = MessageHeader::request(reply.op, reply.id, reply.sent_ns, KeyHash::of(&reply.key).0);
    let err;
    let payload: &[u8] = match reply.status {
        ReplyStatus::Ok => reply.value.as_deref().unwrap_or(&[]),
        ReplyStatus::NotFound => {
            err = [ERR_NOT_FOUND];
            &err
        }
        ReplyStatus::Failed => {
            err = [ERR_FAILED];
            &err
        }
    };
    protocol::encode_message(&h, &reply.key, payload, max_datagram)
}

/// Collects fragments per `(sender, request id)` and yields complete messages.
#[derive(Default)]
pub struct Assembler {
    partial: HashMap<(SocketAddr, u64), Reassembly>,
}

/// A fully received message.
#[derive(Debug, Clone)]
pub struct Message {
    pub header: MessageHeader,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

impl Assembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pending(&self) -> usize {
        self.partial.len()
    }

    pub fn push(&mut self, from: SocketAddr, frame: Frame) -> Option<Message> {
        let header = frame.header;
        if header.frag_count == 1 {
            return Some(Message { header, key: frame.key, value: frame.payload });
        }
        let k = (from, header.request_id);
        let key = frame.key.clone();
        let r = self.partial.entry(k).or_insert_with(|| Reassembly::new(&header));
        if let Err(e) = r.insert(frame) {
            warn!("dropping request {}: {e}", header.request_id);
            self.partial.remove(&k);
            return None;
        }
        if !r.is_complete() {
            return None;
        }
        let value = self.partial.remove(&k)?.finish().ok()?;
        let mut header = header;
        header.frag_index = 0;
        Some(Message { header, key, value })
    }
}

/// Socket buffer requested for every endpoint. A 512 KB value is 360
/// datagrams; the kernel default buffer holds far fewer, and loopback drops
/// whatever does not fit. The kernel caps the request at its own maximum.
pub const SOCKET_BUFFER: usize = 4 << 20;

/// Binds a UDP socket with enlarged send and receive buffers.
pub fn bind_socket(addr: SocketAddr) -> io::Result<UdpSocket> {
    let s = Socket::new(Domain::for_address(addr), Type::DGRAM, Some(Protocol::UDP))?;
    // best effort: a smaller buffer only means more loss under bursts
    let _ = s.set_recv_buffer_size(SOCKET_BUFFER);
    let _ = s.set_send_buffer_size(SOCKET_BUFFER);
    s.bind(&addr.into())?;
    Ok(s.into())
}

/// Nanoseconds since the process-wide clock origin.
pub fn clock_ns() -> u64 {
    static ORIGIN: std::sync::OnceLock<Instant> = std::sync::OnceLock::new();
    ORIGIN.get_or_init(Instant::now).elapsed().as_nanos() as u64
}

pub struct UdpServer {
    server: Arc<Server>,
    stop: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
    local: Vec<SocketAddr>,
    epoch_rows: Arc<Mutex<Vec<String>>>,
    dropped: Arc<AtomicU64>,
}

impl UdpServer {
    /// Binds one socket per RX queue and starts all threads. A `port_base` of
    /// 0 lets the OS pick every port.
    pub fn start(server: Arc<Server>, ip: IpAddr, port_base: u16) -> io::Result<Self> {
        let n = server.cores();
        let mut sockets = Vec::with_capacity(n);
        for i in 0..n {
            let port = if port_base == 0 { 0 } else { protocol::rx_port(port_base, i) };
            let s = bind_socket(SocketAddr::new(ip, port))?;
            s.set_read_timeout(Some(POLL))?;
            sockets.push(s);
        }
        let local = sockets.iter().map(|s| s.local_addr()).collect::<io::Result<Vec<_>>>()?;
        let stop = Arc::new(AtomicBool::new(false));
        let dropped = Arc::new(AtomicU64::new(0));
        let epoch_rows = Arc::new(Mutex::new(Vec::new()));
        let mut handles = Vec::new();

        for (q, sock) in sockets.iter().enumerate() {
            let sock = sock.try_clone()?;
            let (server, stop, dropped) = (server.clone(), stop.clone(), dropped.clone());
            handles.push(thread::Builder::new().name(format!("rx{q}")).spawn(move || {
                rx_loop(q, sock, &server, &stop, &dropped)
            })?);
        }
        for (core, sock) in sockets.into_iter().enumerate() {
            let (tx, rx) = mpsc::channel::<Reply>();
            let stop_tx = stop.clone();
            handles.push(thread::Builder::new().name(format!("tx{core}")).spawn(move || tx_loop(sock, rx, &stop_tx))?);
            let (server, stop) = (server.clone(), stop.clone());
            handles.push(thread::Builder::new().name(format!("core{core}")).spawn(move || {
                core_loop(core, &server, tx, &stop)
            })?);
        }
        if server.config().policy == Policy::SizeAware {
            let (server, stop, rows) = (server.clone(), stop.clone(), epoch_rows.clone());
            handles.push(thread::Builder::new().name("control".into()).spawn(move || {
                control_loop(&server, &stop, &rows)
            })?);
        }
        Ok(UdpServer { server, stop, handles, local, epoch_rows, dropped })
    }

    pub fn server(&self) -> &Arc<Server> {
        &self.server
    }

    /// Address of each RX queue's socket.
    pub fn addrs(&self) -> &[SocketAddr] {
        &self.local
    }

    /// Malformed or inconsistent datagrams discarded so far.
    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    /// Per-core CSV rows, one batch per control epoch.
    pub fn epoch_rows(&self) -> Vec<String> {
        self.epoch_rows.lock().unwrap().clone()
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for UdpServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

fn rx_loop(q: usize, sock: UdpSocket, server: &Server, stop: &AtomicBool, dropped: &AtomicU64) {
    let mut buf = vec![0u8; 65536];
    let mut asm = Assembler::new();
    while !stop.load(Ordering::Relaxed) {
        let (len, from) = match sock.recv_from(&mut buf) {
            Ok(x) => x,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(e) => {
                warn!("rx{q}: {e}");
                continue;
            }
        };
        let frame = match protocol::decode(&buf[..len]) {
            Ok(f) if f.header.opcode.is_request() => f,
            Ok(_) | Err(_) => {
                dropped.fetch_add(1, Ordering::Relaxed);
                continue;
            }
        };
        let Some(msg) = asm.push(from, frame) else { continue };
        let h = msg.header;
        let mut req = Request::get(h.request_id, msg.key, h.client_timestamp, q);
        req.hash = KeyHash(h.keyhash);
        req.reply_to = Some(from);
        if h.opcode == Opcode::Put {
            req.op = Opcode::Put;
            req.value = msg.value;
        }
        // never drop: wait for room
        let mut req = req;
        loop {
            match server.push_rx(q, req) {
                Ok(()) => break,
                Err(r) => {
                    req = r;
                    if stop.load(Ordering::Relaxed) {
                        return;
                    }
                    thread::yield_now();
                }
            }
        }
    }
}

fn core_loop(core: usize, server: &Server, tx: Sender<Reply>, stop: &AtomicBool) {
    let mut st = server.core_state(core);
    let mut out = Vec::new();
    let mut idle = 0u32;
    while !stop.load(Ordering::Relaxed) {
        let o = server.run_batch(&mut st, clock_ns(), &mut out);
        for r in out.drain(..) {
            let _ = tx.send(r);
        }
        if o.worked {
            idle = 0;
        } else {
            idle += 1;
            if idle < 64 {
                std::hint::spin_loop();
            } else if idle < 256 {
                thread::yield_now();
            } else {
                thread::sleep(Duration::from_micros(50));
            }
        }
    }
}

fn tx_loop(sock: UdpSocket, rx: Receiver<Reply>, stop: &AtomicBool) {
    let mut active: VecDeque<(VecDeque<Vec<u8>>, SocketAddr)> = VecDeque::new();
    let accept = |r: Reply, active: &mut VecDeque<_>| {
        let Some(to) = r.reply_to else { return };
        match encode_reply(&r, MAX_DATAGRAM) {
            Ok(d) => active.push_back((d.into_iter().collect(), to)),
            Err(e) => warn!("reply {} not encodable: {e}", r.id),
        }
    };
    loop {
        if active.is_empty() {
            match rx.recv_timeout(POLL) {
                Ok(r) => accept(r, &mut active),
                Err(RecvTimeoutError::Timeout) => {
                    if stop.load(Ordering::Relaxed) {
                        return;
                    }
                    continue;
                }
                Err(RecvTimeoutError::Disconnected) => return,
            }
        }
        while let Ok(r) = rx.try_recv() {
            accept(r, &mut active);
        }
        // one datagram per pending reply per round
        if let Some((mut frags, to)) = active.pop_front() {
            if let Some(d) = frags.pop_front() {
                if let Err(e) = sock.send_to(&d, to) {
                    debug!("send to {to}: {e}");
                }
            }
            if !frags.is_empty() {
                active.push_back((frags, to));
            }
        }
    }
}

fn control_loop(server: &Server, stop: &AtomicBool, rows: &Mutex<Vec<String>>) {
    let cfg = server.config().control.clone();
    let epoch = Duration::from_nanos(cfg.epoch_ns);
    let mut ctl = Controller::new(cfg);
    let mut prev = server.stats();
    let mut last = Instant::now();
    while !stop.load(Ordering::Relaxed) {
        let deadline = last + epoch;
        while Instant::now() < deadline {
            if stop.load(Ordering::Relaxed) {
                return;
            }
            thread::sleep(POLL.min(deadline.saturating_duration_since(Instant::now())));
        }
        let plan: Arc<ShardPlan> = ctl.control_epoch(server.histograms());
        server.publish_plan(plan);
        let now = server.stats();
        let delta: Vec<_> = now.iter().zip(&prev).map(|(a, b)| a.since(b)).collect();
        let dt = last.elapsed().as_nanos() as u64;
        rows.lock().unwrap().extend(server.epoch_rows(clock_ns(), dt, &delta));
        prev = now;
        last = Instant::now();
    }
}

//! Point-to-point byte transports carrying encoded frames.
//!
//! Delivery is FIFO per (sender, receiver) channel and receives name their
//! sender, so the interleaving of different channels never changes what a
//! worker computes.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::wire::{parse_header, HEADER_LEN};
use crate::error::CommError;

pub trait Transport: Send {
    fn rank(&self) -> usize;
    fn world(&self) -> usize;
    /// Sends one encoded frame to `to`.
    fn send(&mut self, to: usize, frame: &[u8]) -> Result<(), CommError>;
    /// Next frame from `from`, waiting at most `timeout`.
    fn recv(&mut self, from: usize, timeout: Duration) -> Result<Vec<u8>, CommError>;
}

struct MailState {
    queues: Vec<VecDeque<Vec<u8>>>,
    closed: Vec<bool>,
}

/// Incoming queues of one rank, one per sender.
struct Mailbox {
    state: Mutex<MailState>,
    cv: Condvar,
}

impl Mailbox {
    fn new(world: usize) -> Mailbox {
        Mailbox {
            state: Mutex::new(MailState { queues: vec![VecDeque::new(); world], closed: vec![false; world] }),
            cv: Condvar::new(),
        }
    }

    fn push(&self, from: usize, frame: Vec<u8>) {
        self.state.lock().unwrap().queues[from].push_back(frame);
        self.cv.notify_all();
    }

    fn close(&self, from: usize) {
        self.state.lock().unwrap().closed[from] = true;
        self.cv.notify_all();
    }

    fn pop(&self, from: usize, timeout: Duration) -> Result<Vec<u8>, CommError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(f) = st.queues[from].pop_front() {
                return Ok(f);
            }
            if st.closed[from] {
                return Err(CommError::Disconnected(from));
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(CommError::Timeout { from, millis: timeout.as_millis() as u64 });
            }
            st = self.cv.wait_timeout(st, deadline - now).unwrap().0;
        }
    }
}

fn check_peer(rank: usize, world: usize, peer: usize) -> Result<(), CommError> {
    if peer >= world || peer == rank {
        return Err(CommError::World(format!("rank {rank} cannot address rank {peer} in a world of {world}")));
    }
    Ok(())
}

/// In-process transport; one endpoint per simulated worker.
pub struct SimTransport {
    rank: usize,
    boxes: Arc<Vec<Mailbox>>,
    latency: Option<Duration>,
}

/// Endpoints for a simulated world of `world` ranks. `latency` delays
/// every send on the sending thread.
pub fn sim_world(world: usize, latency: Option<Duration>) -> Vec<SimTransport> {
    let boxes = Arc::new((0..world).map(|_| Mailbox::new(world)).collect::<Vec<_>>());
    (0..world).map(|rank| SimTransport { rank, boxes: Arc::clone(&boxes), latency }).collect()
}

impl Transport for SimTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world(&self) -> usize {
        self.boxes.len()
    }

    fn send(&mut self, to: usize, frame: &[u8]) -> Result<(), CommError> {
        check_peer(self.rank, self.world(), to)?;
        if let Some(l) = self.latency {
            thread::sleep(l);
        }
        self.boxes[to].push(self.rank, frame.to_vec());
        Ok(())
    }

    fn recv(&mut self, from: usize, timeout: Duration) -> Result<Vec<u8>, CommError> {
        check_peer(self.rank, self.world(), from)?;
        self.boxes[self.rank].pop(from, timeout)
    }
}

impl Drop for SimTransport {
    /// Peers waiting on this rank see `Disconnected` instead of a timeout.
    fn drop(&mut self) {
        for (r, b) in self.boxes.iter().enumerate() {
            if r != self.rank {
                b.close(self.rank);
            }
        }
    }
}

/// Transport over one TCP connection per peer. A reader thread per peer
/// splits the byte stream into frames using the length prefix.
pub struct TcpTransport {
    rank: usize,
    world: usize,
    streams: Vec<Option<TcpStream>>,
    inbox: Arc<Mailbox>,
}

fn io_err(what: &str, e: std::io::Error) -> CommError {
    CommError::Transport(format!("{what}: {e}"))
}

impl TcpTransport {
    /// Binds the listening socket of one rank.
    pub fn bind(addr: SocketAddr) -> Result<TcpListener, CommError> {
        TcpListener::bind(addr).map_err(|e| io_err(&format!("cannot listen on {addr}"), e))
    }

    /// Joins the mesh: connects to every lower rank and accepts every
    /// higher one. `addrs[r]` is where rank `r` listens.
    pub fn connect(
        rank: usize,
        listener: TcpListener,
        addrs: &[SocketAddr],
        timeout: Duration,
    ) -> Result<TcpTransport, CommError> {
        let world = addrs.len();
        if rank >= world {
            return Err(CommError::World(format!("rank {rank} in a world of {world}")));
        }
        let deadline = Instant::now() + timeout;
        let mut streams: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();
        for (peer, addr) in addrs.iter().enumerate().take(rank) {
            let mut s = loop {
                match TcpStream::connect(addr) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() >= deadline => return Err(io_err(&format!("connect to rank {peer}"), e)),
                    Err(_) => thread::sleep(Duration::from_millis(10)),
                }
            };
            s.write_all(&(rank as u32).to_le_bytes()).map_err(|e| io_err("handshake", e))?;
            streams[peer] = Some(s);
        }
        listener.set_nonblocking(true).map_err(|e| io_err("listener", e))?;
        let mut pending = world - rank - 1;
        while pending > 0 {
            match listener.accept() {
                Ok((mut s, _)) => {
                    s.set_nonblocking(false).map_err(|e| io_err("accept", e))?;
                    s.set_read_timeout(Some(timeout)).map_err(|e| io_err("accept", e))?;
                    let mut id = [0u8; 4];
                    s.read_exact(&mut id).map_err(|e| io_err("handshake", e))?;
                    let peer = u32::from_le_bytes(id) as usize;
                    if peer <= rank || peer >= world || streams[peer].is_some() {
                        return Err(CommError::World(format!("unexpected handshake from rank {peer}")));
                    }
                    s.set_read_timeout(None).map_err(|e| io_err("accept", e))?;
                    streams[peer] = Some(s);
                    pending -= 1;
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(CommError::Timeout { from: world - pending, millis: timeout.as_millis() as u64 });
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(io_err("accept", e)),
            }
        }
        let inbox = Arc::new(Mailbox::new(world));
        for (peer, s) in streams.iter().enumerate() {
            let Some(s) = s else { continue };
            s.set_nodelay(true).map_err(|e| io_err("socket", e))?;
            let reader = s.try_clone().map_err(|e| io_err("socket", e))?;
            let inbox = Arc::clone(&inbox);
            thread::spawn(move || read_frames(reader, peer, &inbox));
        }
        Ok(TcpTransport { rank, world, streams, inbox })
    }
}

fn read_frames(mut s: TcpStream, peer: usize, inbox: &Mailbox) {
    loop {
        let mut header = [0u8; HEADER_LEN];
        if s.read_exact(&mut header).is_err() {
            break;
        }
        let Ok((len, ..)) = parse_header(&header) else { break };
        let mut frame = header.to_vec();
        frame.resize(HEADER_LEN + len, 0);
        if s.read_exact(&mut frame[HEADER_LEN..]).is_err() {
            break;
        }
        inbox.push(peer, frame);
    }
    inbox.close(peer);
}

impl Transport for TcpTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world(&self) -> usize {
        self.world
    }

    fn send(&mut self, to: usize, frame: &[u8]) -> Result<(), CommError> {
        check_peer(self.rank, self.world, to)?;
        let s = self.streams[to].as_mut().ok_or(CommError::Disconnected(to))?;
        s.write_all(frame).map_err(|_| CommError::Disconnected(to))
    }

    fn recv(&mut self, from: usize, timeout: Duration) -> Result<Vec<u8>, CommError> {
        check_peer(self.rank, self.world, from)?;
        self.inbox.pop(from, timeout)
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for s in self.streams.iter().flatten() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

/// Fully connected TCP world on loopback, one endpoint per rank, for running
/// workers as threads of one process.
pub fn tcp_world(world: usize, timeout: Duration) -> Result<Vec<TcpTransport>, CommError> {
    let listeners = (0..world)
        .map(|_| TcpTransport::bind(SocketAddr::from(([127, 0, 0, 1], 0))))
        .collect::<Result<Vec<_>, _>>()?;
    let addrs = listeners
        .iter()
        .map(|l| l.local_addr().map_err(|e| io_err("listener", e)))
        .collect::<Result<Vec<_>, _>>()?;
    thread::scope(|s| {
        let handles: Vec<_> = listeners
            .into_iter()
            .enumerate()
            .map(|(r, l)| {
                let addrs = &addrs;
                s.spawn(move || TcpTransport::connect(r, l, addrs, timeout))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("connect thread panicked")).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributed::wire::{Frame, MsgType};

    #[test]
    fn sim_is_fifo_per_channel() {
        let mut w = sim_world(2, None);
        for step in 0..3 {
            let f = Frame::new(MsgType::Barrier, 0, step, 0, vec![]).encode();
            w[0].send(1, &f).unwrap();
        }
        let got: Vec<u64> = (0..3)
            .map(|_| Frame::decode(&w[1].recv(0, Duration::from_secs(1)).unwrap()).unwrap().step)
            .collect();
        assert_eq!(got, vec![0, 1, 2]);
    }

    #[test]
    fn sim_timeout_and_disconnect() {
        let mut w = sim_world(2, None);
        let err = w[1].recv(0, Duration::from_millis(20)).unwrap_err();
        assert!(matches!(err, CommError::Timeout { from: 0, millis: 20 }));
        let mut b = w.pop().unwrap();
        drop(w);
        assert!(matches!(b.recv(0, Duration::from_secs(5)), Err(CommError::Disconnected(0))));
        assert!(b.send(1, &[]).is_err());
    }

    #[test]
    fn tcp_mesh_carries_frames() {
        let mut w = tcp_world(3, Duration::from_secs(10)).unwrap();
        let f = Frame::new(MsgType::ArChunk, 2, 7, 1, vec![1, 2, 3, 4, 5]);
        w[2].send(0, &f.encode()).unwrap();
        w[1].send(0, &Frame::new(MsgType::Barrier, 1, 0, 0, vec![]).encode()).unwrap();
        let got = Frame::decode(&w[0].recv(2, Duration::from_secs(5)).unwrap()).unwrap();
        assert_eq!(got, f);
        assert_eq!(Frame::decode(&w[0].recv(1, Duration::from_secs(5)).unwrap()).unwrap().msg_type, MsgType::Barrier);
    }
}

//! Point-to-point byte transports between workers.

use std::io::{ErrorKind, Read, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Message tags, checked on receipt so that a protocol slip fails loudly
/// instead of decoding the wrong payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Tag {
    Merge = 1,
    Balance = 2,
    Reduce = 3,
    Result = 4,
    Gather = 5,
}

impl Tag {
    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => Tag::Merge,
            2 => Tag::Balance,
            3 => Tag::Reduce,
            4 => Tag::Result,
            5 => Tag::Gather,
            _ => return None,
        })
    }

    pub fn phase(self) -> &'static str {
        match self {
            Tag::Merge => "inter-worker merge",
            Tag::Balance => "load balancing",
            Tag::Reduce => "reduction",
            Tag::Result => "result collection",
            Tag::Gather => "gather",
        }
    }
}

/// Ordered, reliable delivery of tagged byte messages between ranks.
/// Messages from one peer arrive in the order they were sent.
pub trait Transport: Send {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;
    fn send(&mut self, to: usize, tag: Tag, payload: &[u8]) -> Result<()>;
    fn recv(&mut self, from: usize, tag: Tag) -> Result<Vec<u8>>;
}

fn failure(rank: usize, tag: Tag, detail: impl Into<String>) -> Error {
    Error::Transport { rank, phase: tag.phase(), detail: detail.into() }
}

type Frame = (Tag, Vec<u8>);

/// In-process transport over channels, one per ordered pair of ranks.
pub struct ThreadTransport {
    rank: usize,
    size: usize,
    tx: Vec<Option<Sender<Frame>>>,
    rx: Vec<Option<Receiver<Frame>>>,
}

impl ThreadTransport {
    /// A fully connected set of `n` endpoints, indexed by rank.
    pub fn mesh(n: usize) -> Vec<ThreadTransport> {
        let mut tx: Vec<Vec<Option<Sender<_>>>> = (0..n).map(|_| (0..n).map(|_| None).collect()).collect();
        let mut rx: Vec<Vec<Option<Receiver<_>>>> = (0..n).map(|_| (0..n).map(|_| None).collect()).collect();
        for from in 0..n {
            for to in 0..n {
                if from != to {
                    let (s, r) = channel();
                    tx[from][to] = Some(s);
                    rx[to][from] = Some(r);
                }
            }
        }
        tx.into_iter().zip(rx).enumerate().map(|(rank, (tx, rx))| ThreadTransport { rank, size: n, tx, rx }).collect()
    }
}

impl Transport for ThreadTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn send(&mut self, to: usize, tag: Tag, payload: &[u8]) -> Result<()> {
        let rank = self.rank;
        let tx =
            self.tx.get(to).and_then(Option::as_ref).ok_or_else(|| failure(rank, tag, format!("no route to {to}")))?;
        tx.send((tag, payload.to_vec())).map_err(|_| failure(rank, tag, format!("rank {to} hung up")))
    }

    fn recv(&mut self, from: usize, tag: Tag) -> Result<Vec<u8>> {
        let rank = self.rank;
        let rx = self
            .rx
            .get(from)
            .and_then(Option::as_ref)
            .ok_or_else(|| failure(rank, tag, format!("no route from {from}")))?;
        let (got, payload) = rx.recv().map_err(|_| failure(rank, tag, format!("rank {from} hung up")))?;
        if got != tag {
            return Err(failure(rank, tag, format!("expected {tag:?} from {from}, got {got:?}")));
        }
        Ok(payload)
    }
}

/// Transport over Unix domain sockets in a shared directory. Frames are a
/// little-endian `u32` payload length, a tag byte, then the payload.
pub struct UnixTransport {
    rank: usize,
    size: usize,
    peers: Vec<Option<UnixStream>>,
}

pub fn socket_path(dir: &Path, rank: usize) -> PathBuf {
    dir.join(format!("rank-{rank}.sock"))
}

impl UnixTransport {
    /// Joins the mesh: listens on this rank's socket, connects to every
    /// lower rank, then accepts every higher rank. Each connection opens
    /// with the connecting rank as a `u32`.
    pub fn connect(rank: usize, size: usize, dir: &Path, timeout: Duration) -> Result<Self> {
        let setup = |detail: String| Error::Transport { rank, phase: "connection setup", detail };
        if rank >= size {
            return Err(setup(format!("rank {rank} outside a mesh of {size}")));
        }
        let mut peers: Vec<Option<UnixStream>> = (0..size).map(|_| None).collect();
        let own = socket_path(dir, rank);
        let listener = if rank + 1 < size {
            let _ = std::fs::remove_file(&own);
            Some(UnixListener::bind(&own).map_err(|e| setup(format!("bind {}: {e}", own.display())))?)
        } else {
            None
        };
        let deadline = Instant::now() + timeout;
        for (peer, slot) in peers.iter_mut().enumerate().take(rank) {
            let path = socket_path(dir, peer);
            let mut stream = loop {
                match UnixStream::connect(&path) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() < deadline => {
                        if !matches!(e.kind(), ErrorKind::NotFound | ErrorKind::ConnectionRefused) {
                            return Err(setup(format!("connect to rank {peer}: {e}")));
                        }
                        std::thread::sleep(Duration::from_millis(10));
                    }
                    Err(e) => return Err(setup(format!("connect to rank {peer}: {e}"))),
                }
            };
            stream.write_all(&(rank as u32).to_le_bytes()).map_err(|e| setup(format!("greet rank {peer}: {e}")))?;
            *slot = Some(stream);
        }
        if let Some(listener) = listener {
            for _ in rank + 1..size {
                let (mut stream, _) = listener.accept().map_err(|e| setup(format!("accept: {e}")))?;
                let mut b = [0u8; 4];
                stream.read_exact(&mut b).map_err(|e| setup(format!("read greeting: {e}")))?;
                let peer = u32::from_le_bytes(b) as usize;
                if peer <= rank || peer >= size || peers[peer].is_some() {
                    return Err(setup(format!("unexpected greeting from rank {peer}")));
                }
                peers[peer] = Some(stream);
            }
            let _ = std::fs::remove_file(&own);
        }
        Ok(Self { rank, size, peers })
    }

    fn stream(&mut self, peer: usize, tag: Tag) -> Result<&mut UnixStream> {
        let rank = self.rank;
        self.peers
            .get_mut(peer)
            .and_then(Option::as_mut)
            .ok_or_else(|| failure(rank, tag, format!("no connection to {peer}")))
    }
}

impl Transport for UnixTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn send(&mut self, to: usize, tag: Tag, payload: &[u8]) -> Result<()> {
        let rank = self.rank;
        let len = u32::try_from(payload.len()).map_err(|_| failure(rank, tag, "message exceeds 4 GiB"))?;
        let mut head = [0u8; 5];
        head[..4].copy_from_slice(&len.to_le_bytes());
        head[4] = tag as u8;
        let s = self.stream(to, tag)?;
        s.write_all(&head)
            .and_then(|_| s.write_all(payload))
            .map_err(|e| failure(rank, tag, format!("send to {to}: {e}")))
    }

    fn recv(&mut self, from: usize, tag: Tag) -> Result<Vec<u8>> {
        let rank = self.rank;
        let s = self.stream(from, tag)?;
        let mut head = [0u8; 5];
        s.read_exact(&mut head).map_err(|e| failure(rank, tag, format!("receive from {from}: {e}")))?;
        let got = Tag::from_byte(head[4]);
        if got != Some(tag) {
            return Err(failure(rank, tag, format!("expected {tag:?} from {from}, got tag byte {}", head[4])));
        }
        let len = u32::from_le_bytes([head[0], head[1], head[2], head[3]]) as usize;
        let mut payload = vec![0u8; len];
        s.read_exact(&mut payload).map_err(|e| failure(rank, tag, format!("receive from {from}: {e}")))?;
        Ok(payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_mesh_delivers_in_order() {
        let mut mesh = ThreadTransport::mesh(3);
        mesh[0].send(2, Tag::Merge, b"a").unwrap();
        mesh[0].send(2, Tag::Merge, b"b").unwrap();
        mesh[1].send(2, Tag::Reduce, b"c").unwrap();
        assert_eq!(mesh[2].recv(1, Tag::Reduce).unwrap(), b"c");
        assert_eq!(mesh[2].recv(0, Tag::Merge).unwrap(), b"a");
        assert_eq!(mesh[2].recv(0, Tag::Merge).unwrap(), b"b");
        mesh[1].send(0, Tag::Merge, b"x").unwrap();
        assert!(matches!(mesh[0].recv(1, Tag::Balance), Err(Error::Transport { rank: 0, .. })));
        assert!(mesh[0].send(0, Tag::Merge, b"").is_err());
    }

    #[test]
    fn hang_up_is_reported() {
        let mut mesh = ThreadTransport::mesh(2);
        let gone = mesh.pop().unwrap();
        drop(gone);
        assert!(matches!(mesh[0].recv(1, Tag::Merge), Err(Error::Transport { phase: "inter-worker merge", .. })));
    }

    #[test]
    fn unix_mesh_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let n = 3;
        let handles: Vec<_> = (0..n)
            .map(|rank| {
                let dir = dir.path().to_path_buf();
                std::thread::spawn(move || {
                    let mut t = UnixTransport::connect(rank, n, &dir, Duration::from_secs(10)).unwrap();
                    for to in 0..n {
                        if to != rank {
                            t.send(to, Tag::Gather, &vec![rank as u8; 1000 * (rank + 1)]).unwrap();
                        }
                    }
                    for from in 0..n {
                        if from != rank {
                            let got = t.recv(from, Tag::Gather).unwrap();
                            assert_eq!(got, vec![from as u8; 1000 * (from + 1)]);
                        }
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
    }
}

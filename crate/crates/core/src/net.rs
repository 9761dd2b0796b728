//! TCP transport: newline-delimited JSON envelopes between the parameter
//! server and stateless worker processes.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::{worker_step, GradientMessage, Transport, WorkOrder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergedInfo {
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Envelope {
    Params { iteration: u64, payload: Box<WorkOrder> },
    Grad { iteration: u64, payload: GradientMessage },
    Converged { iteration: u64, payload: ConvergedInfo },
    /// A worker could not serve the order.
    Error { iteration: u64, payload: String },
}

fn transport_err(e: impl std::fmt::Display) -> Error {
    Error::Transport(e.to_string())
}

struct Peer {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Peer {
    fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true).map_err(transport_err)?;
        Ok(Self {
            writer: stream.try_clone().map_err(transport_err)?,
            reader: BufReader::new(stream),
        })
    }

    fn send(&mut self, env: &Envelope) -> Result<()> {
        let mut line = serde_json::to_vec(env)?;
        line.push(b'\n');
        self.writer.write_all(&line).map_err(transport_err)
    }

    /// `Ok(None)` on timeout.
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Option<Envelope>> {
        self.reader.get_ref().set_read_timeout(timeout).map_err(transport_err)?;
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) => Err(Error::Transport("peer closed the connection".into())),
            Ok(_) => Ok(Some(serde_json::from_str(line.trim_end())?)),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => Ok(None),
            Err(e) => Err(transport_err(e)),
        }
    }
}

/// Listening parameter server.
pub struct SocketServer {
    listener: TcpListener,
}

impl SocketServer {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr).map_err(transport_err)?,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        self.listener.local_addr().map_err(transport_err)
    }

    /// Waits for `nodes` workers; connection order assigns node ids.
    pub fn accept(self, nodes: usize, barrier_timeout: Duration) -> Result<SocketTransport> {
        let peers = (0..nodes)
            .map(|_| {
                let (stream, addr) = self.listener.accept().map_err(transport_err)?;
                log::info!("worker connected from {addr}");
                Peer::new(stream)
            })
            .collect::<Result<_>>()?;
        Ok(SocketTransport { peers, barrier_timeout })
    }
}

pub struct SocketTransport {
    peers: Vec<Peer>,
    barrier_timeout: Duration,
}

impl Transport for SocketTransport {
    fn nodes(&self) -> usize {
        self.peers.len()
    }

    fn round(&mut self, iteration: u64, orders: Vec<WorkOrder>) -> Result<Vec<GradientMessage>> {
        if orders.len() != self.peers.len() {
            return Err(Error::Protocol(format!("{} orders for {} nodes", orders.len(), self.peers.len())));
        }
        for (peer, order) in self.peers.iter_mut().zip(orders) {
            peer.send(&Envelope::Params {
                iteration,
                payload: Box::new(order),
            })?;
        }
        let deadline = Instant::now() + self.barrier_timeout;
        let mut replies = Vec::with_capacity(self.peers.len());
        let mut missing = Vec::new();
        for (node, peer) in self.peers.iter_mut().enumerate() {
            let left = deadline
                .saturating_duration_since(Instant::now())
                .max(Duration::from_millis(1));
            match peer.recv(Some(left))? {
                None => missing.push(node),
                Some(Envelope::Grad { iteration: it, payload }) if it == iteration => replies.push(payload),
                Some(Envelope::Error { payload, .. }) => {
                    return Err(Error::Protocol(format!("node {node}: {payload}")))
                }
                Some(other) => {
                    return Err(Error::Protocol(format!(
                        "node {node} sent unexpected message during iteration {iteration}: {other:?}"
                    )))
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::BarrierTimeout { iteration, missing });
        }
        Ok(replies)
    }

    fn finish(&mut self, iteration: u64, accuracy: f64) -> Result<()> {
        for peer in &mut self.peers {
            peer.send(&Envelope::Converged {
                iteration,
                payload: ConvergedInfo { accuracy },
            })?;
        }
        Ok(())
    }
}

/// Serves work orders until the server announces the end of training.
/// Returns the number of iterations served.
pub fn run_worker(addr: impl ToSocketAddrs) -> Result<u64> {
    let stream = TcpStream::connect(addr).map_err(transport_err)?;
    let mut peer = Peer::new(stream)?;
    let mut served = 0;
    loop {
        match peer.recv(None)? {
            Some(Envelope::Params { iteration, payload }) => {
                let reply = match worker_step(&payload) {
                    Ok(msg) => Envelope::Grad { iteration, payload: msg },
                    Err(e) => Envelope::Error {
                        iteration,
                        payload: e.to_string(),
                    },
                };
                peer.send(&reply)?;
                served += 1;
            }
            Some(Envelope::Converged { .. }) => return Ok(served),
            Some(other) => return Err(Error::Protocol(format!("worker received {other:?}"))),
            None => continue,
        }
    }
}

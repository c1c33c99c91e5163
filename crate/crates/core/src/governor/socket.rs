//! TCP transport for running governors as separate processes.
//!
//! Frames use the same length-prefixed encoding as the simulated network.
//! A node advances one tick per [`SocketNode::poll`], so retransmission
//! timing is measured in polls rather than wall-clock time. Lost
//! connections are reopened on the next send and the retransmit loop
//! recovers anything dropped in between.

use std::collections::BTreeMap;
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};

use super::wire::{decode, encode, GovernorId};
use super::{Command, CommandId, CommandOutput, Governor};
use crate::error::Result;
use crate::model::BubbleId;

struct Inbound {
    stream: TcpStream,
    buffer: Vec<u8>,
}

pub struct SocketNode {
    governor: Governor,
    listener: TcpListener,
    peers: BTreeMap<GovernorId, SocketAddr>,
    outbound: BTreeMap<GovernorId, TcpStream>,
    inbound: Vec<Inbound>,
    now: u64,
    next_command: CommandId,
}

impl SocketNode {
    /// Listens on `addr`. Use port 0 to let the OS pick one.
    pub fn bind(governor: Governor, addr: impl std::net::ToSocketAddrs) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(SocketNode {
            governor,
            listener,
            peers: BTreeMap::new(),
            outbound: BTreeMap::new(),
            inbound: Vec::new(),
            now: 0,
            next_command: 1,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn add_peer(&mut self, id: GovernorId, addr: SocketAddr) {
        self.outbound.remove(&id);
        self.peers.insert(id, addr);
    }

    pub fn governor(&self) -> &Governor {
        &self.governor
    }

    pub fn governor_mut(&mut self) -> &mut Governor {
        &mut self.governor
    }

    pub fn submit(&mut self, command: Command, reserved: Option<BubbleId>) -> CommandId {
        let id = self.next_command;
        self.next_command += 1;
        self.governor.submit(id, command, reserved);
        id
    }

    pub fn take_result(&mut self, id: CommandId) -> Option<Result<CommandOutput>> {
        self.governor.take_result(id)
    }

    pub fn is_idle(&self) -> bool {
        self.governor.is_idle()
    }

    /// Accepts connections, handles every complete frame received, advances
    /// one tick and sends the outbox.
    pub fn poll(&mut self) -> Result<()> {
        self.accept()?;
        self.now += 1;
        for envelope in self.receive() {
            self.governor.handle(envelope, self.now);
        }
        self.governor.on_tick(self.now);
        self.governor.run_commands();
        for envelope in self.governor.take_outbox() {
            let frame = encode(&envelope);
            if self.write_to(&envelope.to, &frame).is_err() {
                self.outbound.remove(&envelope.to);
            }
        }
        Ok(())
    }

    fn accept(&mut self) -> Result<()> {
        loop {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(true)?;
                    self.inbound.push(Inbound { stream, buffer: Vec::new() });
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => return Ok(()),
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn receive(&mut self) -> Vec<super::Envelope> {
        let mut envelopes = Vec::new();
        let mut chunk = [0u8; 8192];
        self.inbound.retain_mut(|conn| {
            let mut open = true;
            loop {
                match conn.stream.read(&mut chunk) {
                    Ok(0) => {
                        open = false;
                        break;
                    }
                    Ok(n) => conn.buffer.extend_from_slice(&chunk[..n]),
                    Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                    Err(_) => {
                        open = false;
                        break;
                    }
                }
            }
            while let Ok((envelope, used)) = decode(&conn.buffer) {
                conn.buffer.drain(..used);
                envelopes.push(envelope);
            }
            open
        });
        envelopes
    }

    fn write_to(&mut self, peer: &GovernorId, frame: &[u8]) -> std::io::Result<()> {
        if !self.outbound.contains_key(peer) {
            let addr = self.peers.get(peer).ok_or_else(|| std::io::Error::new(ErrorKind::NotFound, peer.to_string()))?;
            let stream = TcpStream::connect(addr)?;
            stream.set_nodelay(true)?;
            self.outbound.insert(peer.clone(), stream);
        }
        self.outbound.get_mut(peer).expect("connected above").write_all(frame)
    }
}

//! Agent service: registry persistence, the TCP front end and in-process
//! transports for emulated devices.

pub mod registry;

use std::io;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use crate::clock::Clock;
use crate::cloud::{CloudApi, CloudClient, CloudStub, OfflineCloud};
use crate::net::{serve_frames, FrameHandler, ServiceHandle};
use crate::protocol::agent::Agent;
use crate::protocol::device::{Transport, TransportError, TransportErrorKind};
use crate::protocol::wire::ProtocolMessage;
use registry::{ProductOrderRecord, Registry, RegistryError};

/// Where the agent reaches the cloud.
#[derive(Debug, Clone)]
pub enum CloudLink {
    Local(Arc<CloudStub>),
    Remote(SocketAddr),
    Offline,
}

impl CloudLink {
    pub fn connect(&self) -> Box<dyn CloudApi> {
        match self {
            CloudLink::Local(stub) => Box::new(stub.clone()),
            CloudLink::Remote(addr) => Box::new(CloudClient::new(*addr)),
            CloudLink::Offline => Box::new(OfflineCloud),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    /// `None` keeps the journal in memory.
    pub registry_path: Option<PathBuf>,
    pub product_orders: Vec<ProductOrderRecord>,
    pub cloud: CloudLink,
    pub seed: Option<u64>,
    pub compact_every: Option<usize>,
    pub clock: Clock,
}

impl AgentConfig {
    pub fn in_memory(product_orders: Vec<ProductOrderRecord>, cloud: CloudLink) -> Self {
        Self { registry_path: None, product_orders, cloud, seed: None, compact_every: None, clock: Clock::System }
    }

    pub fn build(&self) -> Result<Agent, RegistryError> {
        let mut registry = match &self.registry_path {
            Some(path) => Registry::open(path, self.product_orders.clone())?,
            None => Registry::in_memory(self.product_orders.clone()),
        };
        registry.set_compact_every(self.compact_every);
        // A reopened journal must not replay the nonces of an earlier run
        // that used the same seed.
        let seed = self.seed.map(|s| s ^ registry.history_len().wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Ok(Agent::new(registry, self.cloud.connect(), self.clock.clone(), seed))
    }
}

pub type SharedAgent = Arc<Mutex<Agent>>;

pub fn lock(agent: &SharedAgent) -> MutexGuard<'_, Agent> {
    agent.lock().unwrap_or_else(|p| p.into_inner())
}

/// A running agent. All requests go through one lock, which is also the
/// registry commit path.
pub struct AgentService {
    handle: ServiceHandle,
    agent: SharedAgent,
}

impl AgentService {
    pub fn addr(&self) -> SocketAddr {
        self.handle.addr()
    }

    pub fn agent(&self) -> SharedAgent {
        self.agent.clone()
    }

    pub fn handle(&self) -> &ServiceHandle {
        &self.handle
    }

    /// Stop serving and fold the journal into a snapshot.
    pub fn shutdown(mut self) -> Result<SharedAgent, RegistryError> {
        self.handle.shutdown();
        let mut a = lock(&self.agent);
        if !a.is_down() {
            a.registry_mut().compact()?;
        }
        drop(a);
        Ok(self.agent.clone())
    }
}

pub fn serve<A: ToSocketAddrs>(agent: Agent, addr: A) -> io::Result<AgentService> {
    let agent: SharedAgent = Arc::new(Mutex::new(agent));
    let shared = agent.clone();
    let handler: FrameHandler = Arc::new(move |frame| lock(&shared).handle_frame(&frame));
    let handle = serve_frames(addr, "agent", handler)?;
    Ok(AgentService { handle, agent })
}

/// Direct in-process channel to an agent.
pub struct InProcess<'a>(pub &'a mut Agent);

impl Transport for InProcess<'_> {
    fn exchange(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, TransportError> {
        self.0.handle(msg).ok_or_else(|| TransportError::new(TransportErrorKind::Closed, "agent is down"))
    }
}

/// In-process channel to a shared agent.
pub struct SharedTransport(pub SharedAgent);

impl Transport for SharedTransport {
    fn exchange(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, TransportError> {
        lock(&self.0).handle(msg).ok_or_else(|| TransportError::new(TransportErrorKind::Closed, "agent is down"))
    }
}

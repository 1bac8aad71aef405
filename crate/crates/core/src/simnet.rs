//! Deterministic N-node point-to-point transport with a virtual clock.
//!
//! Node programs are futures driven round-robin on the calling thread. Every
//! node owns a virtual clock; message timing follows an alpha-beta link model:
//!
//! * a send starts at `max(sender clock, link free)`;
//! * the sender is busy for `beta * bytes` (egress serialization), so
//!   back-to-back sends from one node share its bandwidth;
//! * the message arrives at `start + alpha + beta * bytes`, and the directed
//!   link stays busy until then;
//! * a receive sets the receiver clock to `max(receiver clock, arrival)`.
//!
//! All timing is a function of the event log alone, so the polling order of
//! node programs cannot change the resulting [`StepTrace`].

use std::cell::RefCell;
use std::collections::VecDeque;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("node {node} out of range for {nodes} nodes")]
    BadNode { node: usize, nodes: usize },
    #[error("node {0} cannot send to itself")]
    SelfSend(usize),
    #[error("deadlock: node {at} waits on node {from}, which will never send")]
    Deadlock { at: usize, from: usize },
    #[error("unmatched send: {count} message(s) from node {from} to node {to} never received")]
    Unconsumed { from: usize, to: usize, count: usize },
    #[error("protocol error at node {at} from node {from}: expected {expected} bytes, got {actual}")]
    SizeMismatch { at: usize, from: usize, expected: usize, actual: usize },
    #[error("protocol error at node {at}: {message}")]
    Protocol { at: usize, message: String },
}

/// Latency/bandwidth of one directed link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkCost {
    pub alpha: f64,
    pub beta: f64,
}

impl LinkCost {
    pub fn transfer_time(&self, bytes: usize) -> f64 {
        self.alpha + self.beta * bytes as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkOverride {
    pub i: usize,
    pub j: usize,
    pub alpha_s: f64,
    pub beta_s_per_byte: f64,
}

/// Network parameters. `alpha_s` is per-message latency in seconds,
/// `beta_s_per_byte` is inverse bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimNetConfig {
    pub nodes: usize,
    pub alpha_s: f64,
    pub beta_s_per_byte: f64,
    #[serde(default)]
    pub links: Vec<LinkOverride>,
}

/// Named network presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Single commodity box: 15 GB/s links, 10 us latency.
    Commodity,
    /// Bandwidth-overprovisioned box: 100 GB/s links.
    Overprovisioned,
    /// Groups of 4 nodes: 10 GB/s inside a group, 5 GB/s between groups.
    CloudMultiNode,
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "commodity" => Ok(Self::Commodity),
            "overprovisioned" => Ok(Self::Overprovisioned),
            "cloud" | "cloud-multinode" => Ok(Self::CloudMultiNode),
            other => Err(format!("unknown preset `{other}` (expected commodity, overprovisioned, cloud)")),
        }
    }
}

pub const DEFAULT_ALPHA_S: f64 = 10e-6;

impl SimNetConfig {
    pub fn uniform(nodes: usize, alpha_s: f64, beta_s_per_byte: f64) -> Self {
        Self { nodes, alpha_s, beta_s_per_byte, links: Vec::new() }
    }

    pub fn preset(preset: Preset, nodes: usize) -> Self {
        match preset {
            Preset::Commodity => Self::uniform(nodes, DEFAULT_ALPHA_S, 1.0 / 15e9),
            Preset::Overprovisioned => Self::uniform(nodes, DEFAULT_ALPHA_S, 1.0 / 100e9),
            Preset::CloudMultiNode => {
                let mut cfg = Self::uniform(nodes, DEFAULT_ALPHA_S, 1.0 / 10e9);
                for i in 0..nodes {
                    for j in 0..nodes {
                        if i != j && i / 4 != j / 4 {
                            cfg.links.push(LinkOverride { i, j, alpha_s: DEFAULT_ALPHA_S, beta_s_per_byte: 1.0 / 5e9 });
                        }
                    }
                }
                cfg
            }
        }
    }

    pub fn commodity(nodes: usize) -> Self {
        Self::preset(Preset::Commodity, nodes)
    }

    pub fn with_nodes(&self, nodes: usize) -> Self {
        Self { nodes, links: self.links.iter().filter(|l| l.i < nodes && l.j < nodes).cloned().collect(), ..*self }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = |a: f64, b: f64| a.is_finite() && b.is_finite() && a >= 0.0 && b >= 0.0;
        if self.nodes == 0 {
            return Err(SimError::InvalidConfig("nodes must be >= 1".into()));
        }
        if !ok(self.alpha_s, self.beta_s_per_byte) {
            return Err(SimError::InvalidConfig("alpha and beta must be finite and >= 0".into()));
        }
        for l in &self.links {
            if l.i >= self.nodes || l.j >= self.nodes || l.i == l.j {
                return Err(SimError::InvalidConfig(format!("bad link override ({}, {})", l.i, l.j)));
            }
            if !ok(l.alpha_s, l.beta_s_per_byte) {
                return Err(SimError::InvalidConfig(format!("bad cost on link ({}, {})", l.i, l.j)));
            }
        }
        Ok(())
    }

    pub fn is_uniform(&self) -> bool {
        self.links.iter().all(|l| l.alpha_s == self.alpha_s && l.beta_s_per_byte == self.beta_s_per_byte)
    }

    pub fn link(&self, i: usize, j: usize) -> LinkCost {
        self.links
            .iter()
            .rev()
            .find(|l| l.i == i && l.j == j)
            .map(|l| LinkCost { alpha: l.alpha_s, beta: l.beta_s_per_byte })
            .unwrap_or(LinkCost { alpha: self.alpha_s, beta: self.beta_s_per_byte })
    }

    pub fn from_json(json: &str) -> Result<Self, SimError> {
        let cfg: Self = serde_json::from_str(json).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Message body. `Phantom` carries only a size, for cost-only simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Data(Vec<u8>),
    Phantom(usize),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Data(d) => d.len(),
            Payload::Phantom(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-step accounting of traffic and virtual time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepTrace {
    pub bytes_sent: Vec<u64>,
    pub bytes_received: Vec<u64>,
    pub messages: u64,
    /// Length of the longest causal chain of messages.
    pub rounds: u32,
    /// Max over nodes of their completion time, in seconds.
    pub virtual_time: f64,
    pub node_time: Vec<f64>,
    /// Max number of compress/decompress stages any element went through.
    pub codec_stages: u32,
    /// Same, counted up to the end of the reduce phase.
    pub reduce_stages: u32,
}

impl StepTrace {
    pub fn empty(nodes: usize) -> Self {
        Self {
            bytes_sent: vec![0; nodes],
            bytes_received: vec![0; nodes],
            node_time: vec![0.0; nodes],
            ..Default::default()
        }
    }

    pub fn total_bytes_sent(&self) -> u64 {
        self.bytes_sent.iter().sum()
    }

    pub fn total_bytes_received(&self) -> u64 {
        self.bytes_received.iter().sum()
    }

    pub fn max_bytes_sent(&self) -> u64 {
        self.bytes_sent.iter().copied().max().unwrap_or(0)
    }

    /// Appends a step that runs after this one: bytes, messages, rounds and times add.
    pub fn append(&mut self, next: &StepTrace) {
        let n = self.bytes_sent.len().max(next.bytes_sent.len());
        self.bytes_sent.resize(n, 0);
        self.bytes_received.resize(n, 0);
        self.node_time.resize(n, 0.0);
        for i in 0..next.bytes_sent.len() {
            self.bytes_sent[i] += next.bytes_sent[i];
            self.bytes_received[i] += next.bytes_received[i];
        }
        let start = self.virtual_time;
        for (i, t) in next.node_time.iter().enumerate() {
            self.node_time[i] = start + t;
        }
        self.messages += next.messages;
        self.rounds += next.rounds;
        self.virtual_time += next.virtual_time;
        self.codec_stages = self.codec_stages.max(next.codec_stages);
        self.reduce_stages = self.reduce_stages.max(next.reduce_stages);
    }
}

struct Message {
    payload: Payload,
    tag: u32,
    arrival: f64,
    depth: u32,
}

/// A received message with its out-of-band instrumentation tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub payload: Payload,
    /// Not counted as traffic; used for per-message instrumentation.
    pub tag: u32,
}

struct NetState {
    n: usize,
    config: SimNetConfig,
    queues: Vec<VecDeque<Message>>,
    link_free: Vec<f64>,
    clock: Vec<f64>,
    depth: Vec<u32>,
    finished: Vec<bool>,
    waiting: Vec<Option<usize>>,
    events: u64,
    trace: StepTrace,
}

impl NetState {
    fn check(&self, node: usize) -> Result<(), SimError> {
        if node >= self.n {
            Err(SimError::BadNode { node, nodes: self.n })
        } else {
            Ok(())
        }
    }
}

/// A node's view of the network inside [`SimNet::run_step`].
#[derive(Clone)]
pub struct NodeHandle {
    id: usize,
    state: Rc<RefCell<NetState>>,
}

impl NodeHandle {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn nodes(&self) -> usize {
        self.state.borrow().n
    }

    /// Current virtual time at this node.
    pub fn now(&self) -> f64 {
        self.state.borrow().clock[self.id]
    }

    /// Advances this node's clock by local work of `seconds`.
    pub fn compute(&self, seconds: f64) {
        self.state.borrow_mut().clock[self.id] += seconds.max(0.0);
    }

    /// Enqueues `payload` on the link to `to`. Never blocks.
    pub fn send(&self, to: usize, payload: Payload) -> Result<(), SimError> {
        self.send_tagged(to, payload, 0)
    }

    /// Like [`send`](Self::send) with an instrumentation tag that costs no bytes.
    pub fn send_tagged(&self, to: usize, payload: Payload, tag: u32) -> Result<(), SimError> {
        let mut st = self.state.borrow_mut();
        st.check(to)?;
        let from = self.id;
        if to == from {
            return Err(SimError::SelfSend(from));
        }
        let n = st.n;
        let cost = st.config.link(from, to);
        let bytes = payload.len();
        let link = from * n + to;
        let start = st.clock[from].max(st.link_free[link]);
        let busy = cost.beta * bytes as f64;
        let arrival = start + cost.alpha + busy;
        st.clock[from] = start + busy;
        st.link_free[link] = arrival;
        let depth = st.depth[from] + 1;
        st.trace.bytes_sent[from] += bytes as u64;
        st.trace.messages += 1;
        st.trace.rounds = st.trace.rounds.max(depth);
        st.queues[link].push_back(Message { payload, tag, arrival, depth });
        st.events += 1;
        Ok(())
    }

    /// Waits for the next message from `from`.
    pub async fn recv(&self, from: usize) -> Result<Payload, SimError> {
        Ok(self.recv_envelope(from).await?.payload)
    }

    /// Waits for the next message from `from`, keeping its tag.
    pub fn recv_envelope(&self, from: usize) -> Recv {
        Recv { node: self.clone(), from }
    }

    /// Receives and checks the payload size.
    pub async fn recv_exact(&self, from: usize, expected: usize) -> Result<Payload, SimError> {
        let p = self.recv(from).await?;
        if p.len() != expected {
            return Err(SimError::SizeMismatch { at: self.id, from, expected, actual: p.len() });
        }
        Ok(p)
    }

    /// Receives a data payload; phantom payloads are a protocol error here.
    pub async fn recv_bytes(&self, from: usize) -> Result<Vec<u8>, SimError> {
        match self.recv(from).await? {
            Payload::Data(d) => Ok(d),
            Payload::Phantom(_) => Err(SimError::Protocol { at: self.id, message: "expected data payload".into() }),
        }
    }

    fn try_recv(&self, from: usize) -> Poll<Result<Envelope, SimError>> {
        let mut st = self.state.borrow_mut();
        if let Err(e) = st.check(from) {
            return Poll::Ready(Err(e));
        }
        let at = self.id;
        if from == at {
            return Poll::Ready(Err(SimError::SelfSend(at)));
        }
        let link = from * st.n + at;
        match st.queues[link].pop_front() {
            Some(msg) => {
                st.clock[at] = st.clock[at].max(msg.arrival);
                st.depth[at] = st.depth[at].max(msg.depth);
                st.trace.bytes_received[at] += msg.payload.len() as u64;
                st.waiting[at] = None;
                st.events += 1;
                Poll::Ready(Ok(Envelope { payload: msg.payload, tag: msg.tag }))
            }
            None if st.finished[from] => Poll::Ready(Err(SimError::Deadlock { at, from })),
            None => {
                st.waiting[at] = Some(from);
                Poll::Pending
            }
        }
    }
}

/// Future returned by [`NodeHandle::recv`].
pub struct Recv {
    node: NodeHandle,
    from: usize,
}

impl Future for Recv {
    type Output = Result<Envelope, SimError>;
    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        self.node.try_recv(self.from)
    }
}

/// Simulated network.
#[derive(Debug, Clone)]
pub struct SimNet {
    config: SimNetConfig,
}

impl SimNet {
    pub fn new(config: SimNetConfig) -> Result<Self, SimError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &SimNetConfig {
        &self.config
    }

    pub fn nodes(&self) -> usize {
        self.config.nodes
    }

    /// Runs one program instance per node to completion and returns their
    /// outputs (by node id) with the step trace.
    pub fn run_step<T, E, F, Fut>(&self, program: F) -> Result<(Vec<T>, StepTrace), E>
    where
        F: Fn(NodeHandle) -> Fut,
        Fut: Future<Output = Result<T, E>>,
        E: From<SimError>,
    {
        self.run_step_ordered(program, false)
    }

    pub(crate) fn run_step_ordered<T, E, F, Fut>(&self, program: F, reverse: bool) -> Result<(Vec<T>, StepTrace), E>
    where
        F: Fn(NodeHandle) -> Fut,
        Fut: Future<Output = Result<T, E>>,
        E: From<SimError>,
    {
        let n = self.config.nodes;
        let state = Rc::new(RefCell::new(NetState {
            n,
            config: self.config.clone(),
            queues: (0..n * n).map(|_| VecDeque::new()).collect(),
            link_free: vec![0.0; n * n],
            clock: vec![0.0; n],
            depth: vec![0; n],
            finished: vec![false; n],
            waiting: vec![None; n],
            events: 0,
            trace: StepTrace::empty(n),
        }));
        let mut futures: Vec<Option<Pin<Box<Fut>>>> = (0..n)
            .map(|id| Some(Box::pin(program(NodeHandle { id, state: state.clone() }))))
            .collect();
        let mut outputs: Vec<Option<T>> = (0..n).map(|_| None).collect();
        let mut cx = Context::from_waker(Waker::noop());
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };

        loop {
            let before = state.borrow().events;
            let mut pending = false;
            for &i in &order {
                let Some(fut) = futures[i].as_mut() else { continue };
                match fut.as_mut().poll(&mut cx) {
                    Poll::Ready(Ok(out)) => {
                        outputs[i] = Some(out);
                        futures[i] = None;
                        let mut st = state.borrow_mut();
                        st.finished[i] = true;
                        st.waiting[i] = None;
                        st.events += 1;
                    }
                    Poll::Ready(Err(e)) => return Err(e),
                    Poll::Pending => pending = true,
                }
            }
            if !pending {
                break;
            }
            let st = state.borrow();
            if st.events == before {
                let (at, from) = (0..n)
                    .find_map(|i| st.waiting[i].map(|f| (i, f)))
                    .expect("a pending node is waiting on a receive");
                return Err(SimError::Deadlock { at, from }.into());
            }
        }

        let mut st = state.borrow_mut();
        for link in 0..n * n {
            if !st.queues[link].is_empty() {
                return Err(SimError::Unconsumed { from: link / n, to: link % n, count: st.queues[link].len() }.into());
            }
        }
        let clock = st.clock.clone();
        st.trace.virtual_time = clock.iter().copied().fold(0.0, f64::max);
        st.trace.node_time = clock;
        let trace = std::mem::take(&mut st.trace);
        Ok((outputs.into_iter().map(|o| o.expect("all nodes finished")).collect(), trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(n: usize, alpha: f64, beta: f64) -> SimNet {
        SimNet::new(SimNetConfig::uniform(n, alpha, beta)).unwrap()
    }

    #[test]
    fn single_send_timing() {
        let (_, t) = net(2, 1e-5, 1e-9)
            .run_step(|h: NodeHandle| async move {
                match h.id() {
                    0 => h.send(1, Payload::Data(vec![0; 1000])),
                    _ => h.recv(0).await.map(|_| ()),
                }
            })
            .unwrap();
        assert!((t.virtual_time - 1.1e-5).abs() < 1e-18);
        assert_eq!(t.bytes_sent, vec![1000, 0]);
        assert_eq!(t.bytes_received, vec![0, 1000]);
        assert_eq!(t.rounds, 1);
    }

    #[test]
    fn zero_byte_costs_alpha() {
        let (_, t) = net(2, 3e-6, 1e-9)
            .run_step(|h: NodeHandle| async move {
                match h.id() {
                    0 => h.send(1, Payload::Data(vec![])),
                    _ => h.recv(0).await.map(|_| ()),
                }
            })
            .unwrap();
        assert_eq!(t.virtual_time, 3e-6);
    }

    #[test]
    fn fifo_per_link() {
        let (out, _) = net(2, 0.0, 0.0)
            .run_step(|h: NodeHandle| async move {
                if h.id() == 0 {
                    h.send(1, Payload::Data(vec![1]))?;
                    h.send(1, Payload::Data(vec![2]))?;
                    Ok(vec![])
                } else {
                    let a = h.recv_bytes(0).await?;
                    let b = h.recv_bytes(0).await?;
                    Ok::<_, SimError>(vec![a[0], b[0]])
                }
            })
            .unwrap();
        assert_eq!(out[1], vec![1, 2]);
    }

    #[test]
    fn empty_programs_zero_trace() {
        let (_, t) = net(4, 1.0, 1.0).run_step(|_h: NodeHandle| async move { Ok::<_, SimError>(()) }).unwrap();
        assert_eq!(t, StepTrace::empty(4));
    }

    #[test]
    fn ping_pong_critical_path() {
        let (alpha, beta, d) = (2e-6, 1e-9, 5000usize);
        let (_, t) = net(2, alpha, beta)
            .run_step(|h: NodeHandle| async move {
                if h.id() == 0 {
                    h.send(1, Payload::Data(vec![0; d]))?;
                    h.recv_exact(1, d).await?;
                } else {
                    h.recv_exact(0, d).await?;
                    h.send(0, Payload::Data(vec![0; d]))?;
                }
                Ok::<_, SimError>(())
            })
            .unwrap();
        let expect = 2.0 * (alpha + beta * d as f64);
        assert!((t.virtual_time - expect).abs() < 1e-15);
        assert_eq!(t.rounds, 2);
    }

    #[test]
    fn all_to_all_counts() {
        let chunk = 100usize;
        let (_, t) = net(8, 1e-6, 1e-9)
            .run_step(|h: NodeHandle| async move {
                let (me, n) = (h.id(), h.nodes());
                for k in 1..n {
                    h.send((me + k) % n, Payload::Phantom(chunk))?;
                }
                for k in 1..n {
                    h.recv_exact((me + n - k) % n, chunk).await?;
                }
                Ok::<_, SimError>(())
            })
            .unwrap();
        assert!(t.bytes_sent.iter().all(|&b| b == 7 * chunk as u64));
        assert!(t.bytes_received.iter().all(|&b| b == 7 * chunk as u64));
        assert_eq!(t.total_bytes_sent(), t.total_bytes_received());
    }

    #[test]
    fn recv_from_finished_node_is_deadlock() {
        let err = net(2, 0.0, 0.0)
            .run_step(|h: NodeHandle| async move {
                if h.id() == 1 {
                    h.recv(0).await?;
                }
                Ok::<_, SimError>(())
            })
            .unwrap_err();
        assert_eq!(err, SimError::Deadlock { at: 1, from: 0 });
        assert!(err.to_string().contains("node 1 waits on node 0"));
    }

    #[test]
    fn mutual_wait_is_deadlock() {
        let err = net(2, 0.0, 0.0)
            .run_step(|h: NodeHandle| async move {
                h.recv(1 - h.id()).await?;
                Ok::<_, SimError>(())
            })
            .unwrap_err();
        assert!(matches!(err, SimError::Deadlock { .. }));
    }

    #[test]
    fn unmatched_send_reported() {
        let err = net(2, 0.0, 0.0)
            .run_step(|h: NodeHandle| async move {
                if h.id() == 0 {
                    h.send(1, Payload::Phantom(1))?;
                }
                Ok::<_, SimError>(())
            })
            .unwrap_err();
        assert_eq!(err, SimError::Unconsumed { from: 0, to: 1, count: 1 });
    }

    #[test]
    fn size_mismatch_is_protocol_error() {
        let err = net(2, 0.0, 0.0)
            .run_step(|h: NodeHandle| async move {
                if h.id() == 0 {
                    h.send(1, Payload::Phantom(3))?;
                } else {
                    h.recv_exact(0, 4).await?;
                }
                Ok::<_, SimError>(())
            })
            .unwrap_err();
        assert!(matches!(err, SimError::SizeMismatch { expected: 4, actual: 3, .. }));
    }

    #[test]
    fn bad_ids_rejected() {
        let err = net(2, 0.0, 0.0)
            .run_step(|h: NodeHandle| async move { h.send(h.id(), Payload::Phantom(1)) })
            .unwrap_err();
        assert!(matches!(err, SimError::SelfSend(_)));
        let err = net(2, 0.0, 0.0).run_step(|h: NodeHandle| async move { h.send(5, Payload::Phantom(1)) }).unwrap_err();
        assert!(matches!(err, SimError::BadNode { node: 5, nodes: 2 }));
    }

    #[test]
    fn config_json_and_overrides() {
        let json = r#"{"nodes":3,"alpha_s":1e-5,"beta_s_per_byte":1e-9,
                       "links":[{"i":0,"j":2,"alpha_s":2e-5,"beta_s_per_byte":4e-9}]}"#;
        let cfg = SimNetConfig::from_json(json).unwrap();
        assert_eq!(cfg.link(0, 2), LinkCost { alpha: 2e-5, beta: 4e-9 });
        assert_eq!(cfg.link(2, 0), LinkCost { alpha: 1e-5, beta: 1e-9 });
        assert!(!cfg.is_uniform());
        assert!(SimNetConfig::from_json(r#"{"nodes":0,"alpha_s":0,"beta_s_per_byte":0}"#).is_err());
        assert!(SimNetConfig::from_json(r#"{"nodes":2,"alpha_s":-1,"beta_s_per_byte":0}"#).is_err());
        let cloud = SimNetConfig::preset(Preset::CloudMultiNode, 8);
        assert_eq!(cloud.link(0, 1).beta, 1.0 / 10e9);
        assert_eq!(cloud.link(0, 4).beta, 1.0 / 5e9);
    }
}

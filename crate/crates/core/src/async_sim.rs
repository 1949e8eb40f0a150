//! Slotted discrete-event simulation of decentralized node self-selection.
//!
//! Every node runs a geometric countdown and fires when it reaches zero.
//! Fired nodes try to lock their closed neighborhoods in ascending index
//! order; a node whose closed neighborhood overlaps an already-locked one is
//! blocked for the slot. Lock holders then act exactly like one serial
//! iteration (coin flip, gradient step or neighborhood average). Metrics are
//! indexed by effective updates, so a run with no conflicts replays the
//! serial engine.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Geometric;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Action, EngineError, GlobalState, MetricsTrace, Simulation};
use crate::graph::Graph;
use crate::problem::Problem;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AsyncError {
    #[error("firing probability {0} must lie in (0, 1)")]
    InvalidProbability(f64),
    #[error("expected {expected} firing probabilities, got {got}")]
    Count { expected: usize, got: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Geometric countdown timer of one node.
#[derive(Debug, Clone)]
pub struct NodeClock {
    pub node: usize,
    pub p_fire: f64,
    pub countdown: u64,
    dist: Geometric,
    rng: ChaCha8Rng,
}

impl NodeClock {
    pub fn new(node: usize, p_fire: f64, rng: ChaCha8Rng) -> Result<Self, AsyncError> {
        if !(p_fire > 0.0 && p_fire < 1.0) {
            return Err(AsyncError::InvalidProbability(p_fire));
        }
        let dist = Geometric::new(p_fire).map_err(|_| AsyncError::InvalidProbability(p_fire))?;
        let mut clock = Self {
            node,
            p_fire,
            countdown: 0,
            dist,
            rng,
        };
        clock.redraw();
        Ok(clock)
    }

    /// Samples a fresh countdown from Geometric(p) on {0, 1, 2, …}.
    pub fn redraw(&mut self) -> u64 {
        self.countdown = self.rng.sample(self.dist);
        self.countdown
    }

    /// Returns true if the node fires this slot; otherwise counts down.
    fn tick(&mut self) -> bool {
        if self.countdown == 0 {
            true
        } else {
            self.countdown -= 1;
            false
        }
    }
}

/// One independently seeded clock per node.
pub fn init_clocks(p_fire: &[f64], seed: u64) -> Result<Vec<NodeClock>, AsyncError> {
    p_fire
        .iter()
        .enumerate()
        .map(|(i, &p)| NodeClock::new(i, p, stream_rng(seed, Stream::Clocks, i as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventAction {
    Gradient,
    Average,
    Blocked,
    LockSent,
    LockDenied,
}

impl EventAction {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventAction::Gradient => "gradient",
            EventAction::Average => "average",
            EventAction::Blocked => "blocked",
            EventAction::LockSent => "lock_sent",
            EventAction::LockDenied => "lock_denied",
        }
    }

    pub fn is_update(&self) -> bool {
        matches!(self, EventAction::Gradient | EventAction::Average)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub slot: u64,
    pub node: usize,
    pub action: EventAction,
    pub messages: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("slot,node,action,messages\n");
        for e in &self.events {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                e.slot,
                e.node,
                e.action.as_str(),
                e.messages
            );
        }
        s
    }

    /// Checks the lock-protocol invariants: nondecreasing slots and, within a
    /// slot, pairwise-disjoint closed neighborhoods among acting nodes.
    pub fn check_safety(&self, graph: &Graph) -> Result<(), String> {
        if let Some(w) = self.events.windows(2).find(|w| w[1].slot < w[0].slot) {
            return Err(format!("slot order violated at slot {}", w[1].slot));
        }
        let mut start = 0;
        while start < self.events.len() {
            let slot = self.events[start].slot;
            let end = start
                + self.events[start..]
                    .iter()
                    .take_while(|e| e.slot == slot)
                    .count();
            let mut owner = vec![usize::MAX; graph.node_count()];
            for e in self.events[start..end]
                .iter()
                .filter(|e| e.action.is_update())
            {
                for j in graph.closed_neighborhood(e.node) {
                    if owner[j] != usize::MAX && owner[j] != e.node {
                        return Err(format!(
                            "slot {slot}: nodes {} and {} both touch node {j}",
                            owner[j], e.node
                        ));
                    }
                    owner[j] = e.node;
                }
            }
            for e in self.events[start..end]
                .iter()
                .filter(|e| e.action == EventAction::Blocked)
            {
                if self.events[start..end]
                    .iter()
                    .any(|u| u.node == e.node && u.action.is_update())
                {
                    return Err(format!("slot {slot}: blocked node {} also acted", e.node));
                }
            }
            start = end;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    pub total_messages: u64,
    pub lock_messages: u64,
    pub data_messages: u64,
    pub conflicts_detected: u64,
}

impl CommStats {
    pub fn add(&mut self, other: &CommStats) {
        self.total_messages += other.total_messages;
        self.lock_messages += other.lock_messages;
        self.data_messages += other.data_messages;
        self.conflicts_detected += other.conflicts_detected;
    }

    fn lock(&mut self, count: u64) {
        self.lock_messages += count;
        self.total_messages += count;
    }

    fn data(&mut self, count: u64) {
        self.data_messages += count;
        self.total_messages += count;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlotOutcome {
    pub events: Vec<Event>,
    pub stats: CommStats,
}

/// Advances every clock by one slot and executes the resulting updates.
pub fn advance_slot(
    clocks: &mut [NodeClock],
    sim: &mut Simulation,
    slot: u64,
) -> Result<SlotOutcome, EngineError> {
    let mut fired = Vec::new();
    for clock in clocks.iter_mut() {
        if clock.tick() {
            fired.push(clock.node);
            // losers re-draw as well, so they do not re-collide in lockstep
            clock.redraw();
        }
    }
    let mut out = SlotOutcome::default();
    if fired.is_empty() {
        return Ok(out);
    }

    let graph = sim.graph();
    let mut locked = vec![false; graph.node_count()];
    let mut winners = Vec::new();
    for &node in &fired {
        let hood = graph.closed_neighborhood(node);
        let requests = graph.degree(node) as u64;
        out.stats.lock(requests);
        if hood.iter().any(|&j| locked[j]) {
            out.stats.conflicts_detected += 1;
            out.events.push(Event {
                slot,
                node,
                action: EventAction::LockDenied,
                messages: requests,
            });
            out.events.push(Event {
                slot,
                node,
                action: EventAction::Blocked,
                messages: 0,
            });
        } else {
            hood.iter().for_each(|&j| locked[j] = true);
            out.events.push(Event {
                slot,
                node,
                action: EventAction::LockSent,
                messages: requests,
            });
            winners.push((node, requests));
        }
    }

    for (node, degree) in winners {
        if sim.is_done() {
            break;
        }
        let event = match sim.act(node)? {
            Action::Gradient => Event {
                slot,
                node,
                action: EventAction::Gradient,
                messages: 0,
            },
            Action::Average => {
                // collect from every neighbor, then broadcast the mean back
                out.stats.data(2 * degree);
                Event {
                    slot,
                    node,
                    action: EventAction::Average,
                    messages: 2 * degree,
                }
            }
        };
        out.events.push(event);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AsyncOutcome {
    pub trace: MetricsTrace,
    pub state: GlobalState,
    pub log: EventLog,
    pub stats: CommStats,
    pub slots: u64,
}

/// Runs slots until the effective-update budget of `problem` is exhausted.
pub fn run_async(problem: Problem, p_fire: &[f64]) -> Result<AsyncOutcome, AsyncError> {
    let n = problem.graph.node_count();
    if p_fire.len() != n {
        return Err(AsyncError::Count {
            expected: n,
            got: p_fire.len(),
        });
    }
    let mut clocks = init_clocks(p_fire, problem.master_seed)?;
    let mut sim = Simulation::new(problem);
    let mut log = EventLog::default();
    let mut stats = CommStats::default();
    let mut slot = 0;
    while !sim.is_done() {
        let outcome = advance_slot(&mut clocks, &mut sim, slot)?;
        log.events.extend(outcome.events);
        stats.add(&outcome.stats);
        slot += 1;
    }
    let (trace, state) = sim.finish();
    Ok(AsyncOutcome {
        trace,
        state,
        log,
        stats,
        slots: slot,
    })
}

/// Default firing probability: `min(1/N, 1/2)`.
pub fn default_p_fire(n: usize) -> f64 {
    (1.0 / n as f64).min(0.5)
}

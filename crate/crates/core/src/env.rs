//! The routing MDP: partial-tour state, feasibility masks, transitions and
//! rewards, plus evaluation and validation of complete tours.
//!
//! The depot is never an action. An episode ends once all `2n` customers are
//! visited; the return leg is paid separately through [`PdpEnv::terminal_reward`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ActionRule, Error, Result};
use crate::instances::{DistanceMatrix, PdpInstance};

/// Partial tour `tau_{0:t}`. Always starts at the depot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteState {
    n: usize,
    tour: Vec<usize>,
    visited: Vec<bool>,
    open_pickups: Vec<usize>,
    done: bool,
}

impl RouteState {
    pub fn new(n: usize) -> Self {
        let mut visited = vec![false; 2 * n + 1];
        visited[0] = true;
        Self {
            n,
            tour: vec![0],
            visited,
            open_pickups: Vec::new(),
            done: false,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn tour(&self) -> &[usize] {
        &self.tour
    }

    /// Customers visited so far, without the leading depot.
    pub fn customers(&self) -> &[usize] {
        &self.tour[1..]
    }

    pub fn visited(&self) -> &[bool] {
        &self.visited
    }

    pub fn current(&self) -> usize {
        *self.tour.last().expect("tour holds the depot")
    }

    /// Pickups whose delivery is still outstanding, in visiting order.
    pub fn open_pickups(&self) -> &[usize] {
        &self.open_pickups
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Step index `t`, the number of customers already placed.
    pub fn step_index(&self) -> usize {
        self.tour.len() - 1
    }

    /// Checks whether `node` may be appended next.
    pub fn check_action(&self, node: usize) -> Result<()> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        if node == 0 {
            return Err(Error::InfeasibleAction { node, rule: ActionRule::Depot });
        }
        if node > 2 * self.n {
            return Err(Error::InvalidTour(format!("node {node} out of range for n = {}", self.n)));
        }
        if self.visited[node] {
            return Err(Error::InfeasibleAction { node, rule: ActionRule::Visited });
        }
        if node > self.n && !self.visited[node - self.n] {
            return Err(Error::InfeasibleAction { node, rule: ActionRule::Precedence });
        }
        Ok(())
    }

    #[inline]
    pub fn is_feasible(&self, node: usize) -> bool {
        !self.done
            && node != 0
            && node <= 2 * self.n
            && !self.visited[node]
            && (node <= self.n || self.visited[node - self.n])
    }

    /// Feasible next nodes as a boolean vector over all `2n + 1` nodes.
    pub fn feasible_mask(&self) -> Result<ActionMask> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        Ok(ActionMask((0..=2 * self.n).map(|j| self.is_feasible(j)).collect()))
    }

    /// Appends `node` in place; the caller has already validated it.
    pub fn push_unchecked(&mut self, node: usize) {
        self.tour.push(node);
        self.visited[node] = true;
        if node <= self.n {
            self.open_pickups.push(node);
        } else {
            let pickup = node - self.n;
            self.open_pickups.retain(|&p| p != pickup);
        }
        self.done = self.tour.len() == 2 * self.n + 1;
    }

    /// Appends `node` in place after checking feasibility.
    pub fn push(&mut self, node: usize) -> Result<()> {
        self.check_action(node)?;
        self.push_unchecked(node);
        Ok(())
    }
}

/// `true` marks a feasible node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionMask(pub Vec<bool>);

impl ActionMask {
    pub fn feasible(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &f)| f).map(|(j, _)| j)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// One instance with its cached distance table.
#[derive(Debug, Clone)]
pub struct PdpEnv<'a> {
    inst: &'a PdpInstance,
    dist: DistanceMatrix,
}

impl<'a> PdpEnv<'a> {
    pub fn new(inst: &'a PdpInstance) -> Self {
        Self {
            inst,
            dist: inst.distance_matrix(),
        }
    }

    pub fn instance(&self) -> &PdpInstance {
        self.inst
    }

    pub fn distances(&self) -> &DistanceMatrix {
        &self.dist
    }

    pub fn initial_state(&self) -> RouteState {
        initial_state(self.inst)
    }

    /// Transition and incremental reward `-D[current][action]`.
    pub fn step(&self, state: &RouteState, action: usize) -> Result<(RouteState, f64)> {
        state.check_action(action)?;
        let reward = -self.dist.get(state.current(), action) / self.inst.speed();
        let mut next = state.clone();
        next.push_unchecked(action);
        Ok((next, reward))
    }

    /// Reward for the closing leg back to the depot, paid once the tour is done.
    pub fn terminal_reward(&self, state: &RouteState) -> f64 {
        debug_assert!(state.is_done());
        -self.dist.get(state.current(), 0) / self.inst.speed()
    }

    pub fn tour_length(&self, order: &[usize]) -> Result<f64> {
        check_permutation(self.inst.n(), order)?;
        Ok(closed_length(&self.dist, order))
    }
}

pub fn initial_state(inst: &PdpInstance) -> RouteState {
    RouteState::new(inst.n())
}

pub fn feasible_mask(state: &RouteState) -> Result<ActionMask> {
    state.feasible_mask()
}

/// Length of the closed route `0 -> order... -> 0` without any validation.
pub(crate) fn closed_length(dist: &DistanceMatrix, order: &[usize]) -> f64 {
    let mut prev = 0;
    let mut total = 0.0;
    for &node in order {
        total += dist.get(prev, node);
        prev = node;
    }
    total + dist.get(prev, 0)
}

fn check_permutation(n: usize, order: &[usize]) -> Result<()> {
    match validate_tour_n(n, order) {
        Ok(()) | Err(Violation::Precedence { .. }) => Ok(()),
        Err(v) => Err(Error::InvalidTour(v.to_string())),
    }
}

/// Total closed-route length (speed 1) of a customer permutation.
pub fn tour_length(inst: &PdpInstance, order: &[usize]) -> Result<f64> {
    check_permutation(inst.n(), order)?;
    Ok(closed_length(&inst.distance_matrix(), order))
}

/// Arrival times along `[depot, order...]`: zero at the depot, then each
/// entry adds the travel time of the edge into that node.
pub fn arrival_times(inst: &PdpInstance, order: &[usize]) -> Result<Vec<f64>> {
    check_permutation(inst.n(), order)?;
    let mut times = Vec::with_capacity(order.len() + 1);
    times.push(0.0);
    let mut prev = 0;
    let mut clock = 0.0;
    for &node in order {
        clock += inst.distance(prev, node) / inst.speed();
        times.push(clock);
        prev = node;
    }
    Ok(times)
}

/// First constraint a candidate tour breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    /// Depot or an index beyond `2n` appears among the customers.
    OutOfRange { position: usize, node: usize },
    /// A customer appears twice (degree balance).
    Duplicate { position: usize, node: usize },
    /// A customer never appears (degree balance).
    Missing { node: usize },
    /// Delivery of `pair` appears before its pickup.
    Precedence { position: usize, pair: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::OutOfRange { position, node } => write!(f, "node {node} at position {position} is not a customer"),
            Violation::Duplicate { position, node } => write!(f, "duplicate visit at node {node} (position {position})"),
            Violation::Missing { node } => write!(f, "node {node} never visited"),
            Violation::Precedence { position, pair } => {
                write!(f, "precedence violation at pair {pair}: delivery at position {position} before pickup")
            }
        }
    }
}

/// Checks single-visit and pickup-before-delivery for a customer permutation.
pub fn validate_tour(inst: &PdpInstance, order: &[usize]) -> std::result::Result<(), Violation> {
    validate_tour_n(inst.n(), order)
}

pub fn validate_tour_n(n: usize, order: &[usize]) -> std::result::Result<(), Violation> {
    let mut seen = vec![false; 2 * n + 1];
    for (position, &node) in order.iter().enumerate() {
        if node == 0 || node > 2 * n {
            return Err(Violation::OutOfRange { position, node });
        }
        if seen[node] {
            return Err(Violation::Duplicate { position, node });
        }
        if node > n && !seen[node - n] {
            return Err(Violation::Precedence { position, pair: node - n });
        }
        seen[node] = true;
    }
    match (1..=2 * n).find(|&j| !seen[j]) {
        Some(node) => Err(Violation::Missing { node }),
        None => Ok(()),
    }
}

/// A complete, validated solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tour {
    pub order: Vec<usize>,
    pub length: f64,
}

impl Tour {
    pub fn new(inst: &PdpInstance, order: Vec<usize>) -> Result<Self> {
        validate_tour(inst, &order).map_err(|v| Error::InvalidTour(v.to_string()))?;
        let length = tour_length(inst, &order)?;
        Ok(Self { order, length })
    }

    pub(crate) fn from_parts(order: Vec<usize>, length: f64) -> Self {
        Self { order, length }
    }
}

/// On-disk tour record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TourFile {
    pub instance_ref: String,
    pub order: Vec<usize>,
    pub length: f64,
}

impl TourFile {
    pub fn new(inst: &PdpInstance, tour: &Tour) -> Self {
        Self {
            instance_ref: inst.reference(),
            order: tour.order.clone(),
            length: tour.length,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

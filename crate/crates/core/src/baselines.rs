//! Reference solvers: an exact precedence-constrained Held-Karp, a
//! brute-force enumerator used to check it, and a nearest-feasible greedy.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::env::{closed_length, validate_tour, PdpEnv, Tour};
use crate::error::{Error, Result};
use crate::instances::PdpInstance;

/// Default customer cap (`2n`) for [`exact_dp`].
pub const DP_DEFAULT_CAP: usize = 16;
/// Largest cap accepted; the table then stays below 1 GiB.
pub const DP_MAX_CAP: usize = 22;
pub const BRUTE_FORCE_CAP: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub order: Vec<usize>,
    pub length: f64,
    pub explored_states: u64,
}

impl OracleResult {
    pub fn tour(&self) -> Tour {
        Tour::from_parts(self.order.clone(), self.length)
    }
}

pub fn exact_dp(inst: &PdpInstance) -> Result<OracleResult> {
    exact_dp_with_cap(inst, DP_DEFAULT_CAP)
}

/// Held-Karp over precedence-closed customer subsets.
///
/// `cost[S][j]` is the shortest path leaving the depot, visiting exactly the
/// customers in `S` and ending at `j`. A subset is only ever reached if every
/// delivery in it has its pickup in it as well.
pub fn exact_dp_with_cap(inst: &PdpInstance, cap: usize) -> Result<OracleResult> {
    let n = inst.n();
    let m = 2 * n;
    let cap = cap.min(DP_MAX_CAP);
    if m > cap {
        return Err(Error::TooLarge { customers: m, cap });
    }
    let dist = inst.distance_matrix();
    let full: usize = (1 << m) - 1;
    let pickup_bits: usize = (1 << n) - 1;
    let node = |bit: usize| bit + 1;

    let mut cost = vec![f64::INFINITY; (1usize << m) * m];
    let mut parent = vec![u8::MAX; (1usize << m) * m];
    for p in 0..n {
        cost[(1 << p) * m + p] = dist.get(0, node(p));
    }

    let mut explored = 0u64;
    for set in 1..=full {
        let picked = set & pickup_bits;
        let delivered = set >> n;
        if delivered & !picked != 0 {
            continue;
        }
        for last in 0..m {
            if set & (1 << last) == 0 {
                continue;
            }
            let here = cost[set * m + last];
            if !here.is_finite() {
                continue;
            }
            explored += 1;
            for next in 0..m {
                if set & (1 << next) != 0 {
                    continue;
                }
                // A delivery needs its pickup already in the set.
                if next >= n && set & (1 << (next - n)) == 0 {
                    continue;
                }
                let grown = set | (1 << next);
                let candidate = here + dist.get(node(last), node(next));
                let slot = grown * m + next;
                if candidate < cost[slot] {
                    cost[slot] = candidate;
                    parent[slot] = last as u8;
                }
            }
        }
    }

    let mut best = f64::INFINITY;
    let mut best_last = usize::MAX;
    for last in 0..m {
        let total = cost[full * m + last] + dist.get(node(last), 0);
        if total < best {
            best = total;
            best_last = last;
        }
    }

    let mut order = Vec::with_capacity(m);
    let mut set = full;
    let mut last = best_last;
    loop {
        order.push(node(last));
        let prev = parent[set * m + last];
        set &= !(1 << last);
        if prev == u8::MAX {
            break;
        }
        last = prev as usize;
    }
    debug_assert_eq!(set, 0);
    order.reverse();

    Ok(OracleResult {
        length: closed_length(&dist, &order),
        order,
        explored_states: explored,
    })
}

/// Enumerates all `(2n)!` orders, keeps those passing validation and returns
/// the shortest; `explored_states` counts the valid orders.
pub fn brute_force(inst: &PdpInstance) -> Result<OracleResult> {
    let m = 2 * inst.n();
    if m > BRUTE_FORCE_CAP {
        return Err(Error::TooLarge { customers: m, cap: BRUTE_FORCE_CAP });
    }
    let dist = inst.distance_matrix();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut valid = 0u64;
    for order in (1..=m).permutations(m) {
        if validate_tour(inst, &order).is_err() {
            continue;
        }
        valid += 1;
        let len = closed_length(&dist, &order);
        if best.as_ref().is_none_or(|(b, _)| len < *b) {
            best = Some((len, order));
        }
    }
    let (length, order) = best.expect("at least one valid order exists");
    Ok(OracleResult {
        order,
        length,
        explored_states: valid,
    })
}

/// Always moves to the nearest feasible node, ties to the lowest index.
pub fn greedy_nearest_feasible(inst: &PdpInstance) -> Tour {
    let env = PdpEnv::new(inst);
    let dist = env.distances();
    let mut state = env.initial_state();
    while !state.is_done() {
        let here = state.current();
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 1..inst.len() {
            if state.is_feasible(j) && dist.get(here, j) < best_d {
                best_d = dist.get(here, j);
                best = j;
            }
        }
        state.push_unchecked(best);
    }
    let order = state.customers().to_vec();
    let length = closed_length(dist, &order);
    Tour::from_parts(order, length)
}

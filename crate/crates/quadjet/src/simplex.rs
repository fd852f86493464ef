//! Exact network simplex for dense balanced transportation problems.
//!
//! Bipartite instances only: `n` sources with supplies, `m` sinks with
//! demands, every source-sink arc present with a finite cost, supplies and
//! demands balanced. The solver keeps its buffers between calls so the
//! per-event transport solves in the metric can run allocation-free.
//!
//! Implementation notes: spanning-tree simplex with an artificial root,
//! big-M artificial arcs, block pivot search, and explicit child lists for
//! subtree re-hanging. Flows on leaving arcs are reset to exactly zero so
//! integer-valued instances stay exact.

use crate::error::{Error, Result};

const STATE_TREE: i8 = 0;
const STATE_LOWER: i8 = 1;
const NONE: u32 = u32::MAX;

/// Relative tolerance used to decide that two total masses are balanced.
pub const BALANCE_TOL: f64 = 1e-12;

pub struct NetworkSimplex {
    n: usize,
    m: usize,
    flow: Vec<f64>,
    state: Vec<i8>,
    pi: Vec<f64>,
    parent: Vec<u32>,
    pred: Vec<u32>,
    /// True when the pred arc is oriented node -> parent.
    dir_up: Vec<bool>,
    children: Vec<Vec<u32>>,
    mark: Vec<u32>,
    mark_version: u32,
    stack: Vec<u32>,
    path: Vec<(u32, u32, bool)>,
    next_arc: usize,
    objective: f64,
}

impl Default for NetworkSimplex {
    fn default() -> Self {
        Self::new()
    }
}

impl NetworkSimplex {
    pub fn new() -> Self {
        NetworkSimplex {
            n: 0,
            m: 0,
            flow: Vec::new(),
            state: Vec::new(),
            pi: Vec::new(),
            parent: Vec::new(),
            pred: Vec::new(),
            dir_up: Vec::new(),
            children: Vec::new(),
            mark: Vec::new(),
            mark_version: 0,
            stack: Vec::new(),
            path: Vec::new(),
            next_arc: 0,
            objective: 0.0,
        }
    }

    /// Solve the transportation problem and return the optimal objective.
    /// Flows and dual potentials stay queryable until the next call.
    pub fn solve(
        &mut self,
        n: usize,
        m: usize,
        supply: &[f64],
        demand: &[f64],
        cost: &[f64],
    ) -> Result<f64> {
        if n == 0 || m == 0 {
            return Err(Error::Dimension("empty transportation problem".into()));
        }
        if supply.len() != n || demand.len() != m || cost.len() != n * m {
            return Err(Error::Dimension(format!(
                "expected supply {n}, demand {m}, cost {}x{}, got {}/{}/{}",
                n,
                m,
                supply.len(),
                demand.len(),
                cost.len()
            )));
        }
        let total_supply: f64 = supply.iter().sum();
        let total_demand: f64 = demand.iter().sum();
        if supply.iter().chain(demand.iter()).any(|&x| !(x.is_finite() && x >= 0.0)) {
            return Err(Error::Domain("masses must be finite and >= 0".into()));
        }
        if (total_supply - total_demand).abs() > BALANCE_TOL * total_supply.max(1.0) {
            return Err(Error::Domain(format!(
                "unbalanced masses: total supply {total_supply} vs demand {total_demand}"
            )));
        }
        let mut max_cost: f64 = 0.0;
        for &c in cost {
            if !c.is_finite() {
                return Err(Error::Domain("costs must be finite".into()));
            }
            max_cost = max_cost.max(c.abs());
        }

        self.init(n, m, supply, demand, max_cost);
        let num_real = n * m;
        let num_arcs = num_real + n + m;
        let root = (n + m) as u32;
        let art_cost = (n + m + 1) as f64 * max_cost + 1.0;
        let opt_tol = 1e-11 * (1.0 + max_cost);
        let block = ((num_arcs as f64).sqrt() as usize).max(16);
        let pivot_cap = 100 * (num_arcs + n + m) + 1000;

        let endpoints = |a: usize| -> (u32, u32, f64) {
            if a < num_real {
                ((a / m) as u32, (n + a % m) as u32, cost[a])
            } else {
                let v = (a - num_real) as u32;
                if (v as usize) < n {
                    (v, root, art_cost)
                } else {
                    (root, v, art_cost)
                }
            }
        };

        let mut pivots = 0usize;
        loop {
            // Block search for the most violating nontree arc.
            let mut best_arc = usize::MAX;
            let mut best_rc = -opt_tol;
            let mut a = self.next_arc;
            let mut in_block = 0usize;
            for _ in 0..num_arcs {
                if self.state[a] == STATE_LOWER {
                    let (t, h, c) = endpoints(a);
                    let rc = c + self.pi[t as usize] - self.pi[h as usize];
                    if rc < best_rc {
                        best_rc = rc;
                        best_arc = a;
                    }
                }
                a += 1;
                if a == num_arcs {
                    a = 0;
                }
                in_block += 1;
                if in_block == block {
                    if best_arc != usize::MAX {
                        break;
                    }
                    in_block = 0;
                }
            }
            self.next_arc = a;
            if best_arc == usize::MAX {
                break;
            }
            pivots += 1;
            if pivots > pivot_cap {
                return Err(Error::Numerical(
                    "network simplex exceeded its pivot budget".into(),
                ));
            }
            let (tail, head, _) = endpoints(best_arc);
            self.pivot(best_arc, tail, head, best_rc)?;
        }

        // Feasibility: artificial arcs must end up empty.
        let supply_scale = total_supply.max(1.0);
        for a in num_real..num_arcs {
            if self.flow[a].abs() > 1e-9 * supply_scale {
                return Err(Error::Numerical(format!(
                    "artificial arc retained flow {}",
                    self.flow[a]
                )));
            }
        }

        let mut objective = 0.0;
        for (a, &f) in self.flow[..num_real].iter().enumerate() {
            if f > 0.0 {
                objective += f * cost[a];
            }
        }
        self.objective = objective;
        Ok(objective)
    }

    fn init(&mut self, n: usize, m: usize, supply: &[f64], demand: &[f64], max_cost: f64) {
        self.n = n;
        self.m = m;
        let num_nodes = n + m + 1;
        let num_real = n * m;
        let num_arcs = num_real + n + m;
        let root = n + m;
        let art_cost = (n + m + 1) as f64 * max_cost + 1.0;

        self.flow.clear();
        self.flow.resize(num_arcs, 0.0);
        self.state.clear();
        self.state.resize(num_arcs, STATE_LOWER);
        self.pi.clear();
        self.pi.resize(num_nodes, 0.0);
        self.parent.clear();
        self.parent.resize(num_nodes, NONE);
        self.pred.clear();
        self.pred.resize(num_nodes, NONE);
        self.dir_up.clear();
        self.dir_up.resize(num_nodes, false);
        if self.children.len() < num_nodes {
            self.children.resize_with(num_nodes, Vec::new);
        }
        for c in &mut self.children[..num_nodes] {
            c.clear();
        }
        self.mark.clear();
        self.mark.resize(num_nodes, 0);
        self.mark_version = 0;
        self.next_arc = 0;

        for v in 0..n + m {
            let arc = num_real + v;
            self.state[arc] = STATE_TREE;
            self.parent[v] = root as u32;
            self.pred[v] = arc as u32;
            self.children[root].push(v as u32);
            if v < n {
                // source -> root
                self.dir_up[v] = true;
                self.flow[arc] = supply[v];
                self.pi[v] = -art_cost;
            } else {
                // root -> sink
                self.dir_up[v] = false;
                self.flow[arc] = demand[v - n];
                self.pi[v] = art_cost;
            }
        }
        self.pi[root] = 0.0;
    }

    fn find_join(&mut self, u: u32, v: u32) -> u32 {
        self.mark_version += 1;
        let version = self.mark_version;
        let mut x = u;
        loop {
            self.mark[x as usize] = version;
            if self.parent[x as usize] == NONE {
                break;
            }
            x = self.parent[x as usize];
        }
        let mut y = v;
        while self.mark[y as usize] != version {
            y = self.parent[y as usize];
        }
        y
    }

    fn pivot(&mut self, arc: usize, tail: u32, head: u32, rc: f64) -> Result<()> {
        let join = self.find_join(tail, head);

        // Leaving arc: minimum residual along the would-be cycle. Arcs on the
        // tail side lose flow when oriented up, arcs on the head side lose
        // flow when oriented down.
        let mut delta = f64::INFINITY;
        let mut u_out = NONE;
        let mut out_on_tail_side = true;
        let mut x = tail;
        while x != join {
            if self.dir_up[x as usize] {
                let f = self.flow[self.pred[x as usize] as usize];
                if f < delta {
                    delta = f;
                    u_out = x;
                    out_on_tail_side = true;
                }
            }
            x = self.parent[x as usize];
        }
        let mut x = head;
        while x != join {
            if !self.dir_up[x as usize] {
                let f = self.flow[self.pred[x as usize] as usize];
                if f <= delta {
                    delta = f;
                    u_out = x;
                    out_on_tail_side = false;
                }
            }
            x = self.parent[x as usize];
        }
        if u_out == NONE {
            return Err(Error::Numerical("unbounded transportation pivot".into()));
        }

        if delta > 0.0 {
            self.flow[arc] += delta;
            let mut x = tail;
            while x != join {
                let a = self.pred[x as usize] as usize;
                if self.dir_up[x as usize] {
                    self.flow[a] -= delta;
                } else {
                    self.flow[a] += delta;
                }
                x = self.parent[x as usize];
            }
            let mut x = head;
            while x != join {
                let a = self.pred[x as usize] as usize;
                if self.dir_up[x as usize] {
                    self.flow[a] += delta;
                } else {
                    self.flow[a] -= delta;
                }
                x = self.parent[x as usize];
            }
        }

        let leaving = self.pred[u_out as usize] as usize;
        self.flow[leaving] = 0.0;
        self.state[leaving] = STATE_LOWER;
        self.state[arc] = STATE_TREE;

        let (u_in, v_in) = if out_on_tail_side {
            (tail, head)
        } else {
            (head, tail)
        };

        // Re-hang the detached subtree: reverse the path u_in -> u_out and
        // attach u_in below v_in via the entering arc.
        self.path.clear();
        let mut x = u_in;
        loop {
            self.path
                .push((x, self.pred[x as usize], self.dir_up[x as usize]));
            if x == u_out {
                break;
            }
            x = self.parent[x as usize];
        }
        // Detach at the old parent of u_out, unhook the path edges.
        let old_parent = self.parent[u_out as usize];
        remove_child(&mut self.children[old_parent as usize], u_out);
        for i in 0..self.path.len() - 1 {
            let child = self.path[i].0;
            let par = self.path[i + 1].0;
            remove_child(&mut self.children[par as usize], child);
        }
        for i in 0..self.path.len() - 1 {
            let (child, pred_arc, up) = self.path[i];
            let par = self.path[i + 1].0;
            // The edge that connected child->par now hangs par below child.
            self.parent[par as usize] = child;
            self.pred[par as usize] = pred_arc;
            self.dir_up[par as usize] = !up;
            self.children[child as usize].push(par);
        }
        self.parent[u_in as usize] = v_in;
        self.pred[u_in as usize] = arc as u32;
        self.dir_up[u_in as usize] = u_in == tail;
        self.children[v_in as usize].push(u_in);

        // Shift potentials of the re-hung subtree so the entering arc's
        // reduced cost becomes zero.
        let sigma = if u_in == tail { -rc } else { rc };
        self.stack.clear();
        self.stack.push(u_in);
        while let Some(x) = self.stack.pop() {
            self.pi[x as usize] += sigma;
            self.stack.extend_from_slice(&self.children[x as usize]);
        }
        Ok(())
    }

    /// Positive bipartite flows of the last solve, row-major order.
    pub fn flows(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let m = self.m;
        self.flow[..self.n * self.m]
            .iter()
            .enumerate()
            .filter(|(_, &f)| f > 0.0)
            .map(move |(a, &f)| (a / m, a % m, f))
    }

    /// Flow on a single source-sink arc of the last solve.
    pub fn flow_between(&self, i: usize, j: usize) -> f64 {
        self.flow[i * self.m + j]
    }

    /// Dual potential of source `i`; feasibility is `u_i + v_j <= c_ij`.
    pub fn row_dual(&self, i: usize) -> f64 {
        -self.pi[i]
    }

    /// Dual potential of sink `j`.
    pub fn col_dual(&self, j: usize) -> f64 {
        self.pi[self.n + j]
    }
}

fn remove_child(children: &mut Vec<u32>, child: u32) {
    let pos = children
        .iter()
        .position(|&c| c == child)
        .expect("tree child list corrupted");
    children.swap_remove(pos);
}

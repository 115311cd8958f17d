//! Finite MDP storage shared by the pendulum tabulation and the gridworld.
//!
//! Transition rows are stored in a compressed sparse layout: the row for
//! `(s, a)` is `entries[offsets[s * n_actions + a]..offsets[s * n_actions + a + 1]]`.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{GridworldSpec, PendulumParams};
use crate::error::{Error, Result};

/// Tolerance on the sum of each transition row.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub next: usize,
    pub prob: f64,
}

/// What produced an MDP. Potentials that need physical constants read them from here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plant {
    Pendulum(PendulumParams),
    Gridworld(GridworldSpec),
    Generic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP {
    n_states: usize,
    n_actions: usize,
    state_dim: usize,
    coords: Vec<f64>,
    offsets: Vec<usize>,
    entries: Vec<Transition>,
    native_rewards: Option<Vec<f64>>,
    terminal: Vec<bool>,
    plant: Plant,
}

impl TabularMDP {
    /// Builds an MDP from per-(s, a) rows in row-major `(s, a)` order.
    ///
    /// `native_rewards`, when present, must have one reward per transition entry
    /// in the same layout as `rows`.
    pub fn from_rows(
        n_actions: usize,
        state_dim: usize,
        coords: Vec<f64>,
        rows: Vec<Vec<Transition>>,
        native_rewards: Option<Vec<Vec<f64>>>,
        terminal: Vec<bool>,
        plant: Plant,
    ) -> Result<Self> {
        if n_actions == 0 {
            return Err(Error::domain("an MDP needs at least one action"));
        }
        if !rows.len().is_multiple_of(n_actions) {
            return Err(Error::domain(format!(
                "{} transition rows is not a multiple of {} actions",
                rows.len(),
                n_actions
            )));
        }
        let n_states = rows.len() / n_actions;
        if n_states == 0 {
            return Err(Error::domain("an MDP needs at least one state"));
        }
        if coords.len() != n_states * state_dim {
            return Err(Error::domain(format!(
                "expected {} coordinates, got {}",
                n_states * state_dim,
                coords.len()
            )));
        }
        if terminal.len() != n_states {
            return Err(Error::domain("terminal mask length differs from n_states"));
        }
        if let Some(nr) = &native_rewards {
            if nr.len() != rows.len() || nr.iter().zip(&rows).any(|(r, t)| r.len() != t.len()) {
                return Err(Error::domain(
                    "native reward layout does not match transitions",
                ));
            }
        }

        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut entries = Vec::with_capacity(rows.iter().map(Vec::len).sum());
        for row in rows {
            entries.extend(row);
            offsets.push(entries.len());
        }
        let mdp = Self {
            n_states,
            n_actions,
            state_dim,
            coords,
            offsets,
            entries,
            native_rewards: native_rewards.map(|r| r.into_iter().flatten().collect()),
            terminal,
            plant,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Checks every row: positive probabilities summing to one, indices in range,
    /// terminal states absorbing.
    pub fn validate(&self) -> Result<()> {
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.row(s, a);
                if row.is_empty() {
                    return Err(Error::domain(format!(
                        "empty transition row at (s={s}, a={a})"
                    )));
                }
                let mut sum = 0.0;
                for t in row {
                    if t.next >= self.n_states {
                        return Err(Error::domain(format!(
                            "next state {} out of range at (s={s}, a={a})",
                            t.next
                        )));
                    }
                    if !(t.prob > 0.0) {
                        return Err(Error::domain(format!(
                            "non-positive probability {} at (s={s}, a={a})",
                            t.prob
                        )));
                    }
                    sum += t.prob;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::domain(format!(
                        "transition row (s={s}, a={a}) sums to {sum}"
                    )));
                }
                if self.terminal[s] && !(row.len() == 1 && row[0].next == s) {
                    return Err(Error::domain(format!(
                        "terminal state {s} is not absorbing"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn coords(&self, s: usize) -> &[f64] {
        &self.coords[s * self.state_dim..(s + 1) * self.state_dim]
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    #[inline]
    pub fn row_range(&self, s: usize, a: usize) -> std::ops::Range<usize> {
        let k = s * self.n_actions + a;
        self.offsets[k]..self.offsets[k + 1]
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[Transition] {
        &self.entries[self.row_range(s, a)]
    }

    /// All transition entries in `(s, a)` row-major order.
    pub fn entries(&self) -> &[Transition] {
        &self.entries
    }

    pub fn has_native_rewards(&self) -> bool {
        self.native_rewards.is_some()
    }

    /// Native reward of the `k`-th entry of row `(s, a)`.
    pub fn native_reward(&self, s: usize, a: usize, k: usize) -> Option<f64> {
        let r = self.row_range(s, a);
        self.native_rewards.as_ref().map(|nr| nr[r.start + k])
    }

    pub(crate) fn native_rewards(&self) -> Option<&[f64]> {
        self.native_rewards.as_deref()
    }

    /// Fraction of rows with a single successor.
    pub fn is_deterministic(&self) -> bool {
        (0..self.n_states * self.n_actions).all(|k| self.offsets[k + 1] - self.offsets[k] == 1)
    }

    /// A random MDP with `branching` successors per row, Dirichlet-like
    /// probabilities and native rewards uniform in `[-1, 1]`.
    pub fn random(n_states: usize, n_actions: usize, branching: usize, seed: u64) -> Result<Self> {
        if branching == 0 || branching > n_states {
            return Err(Error::domain(format!(
                "branching {branching} must lie in 1..={n_states}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(n_states * n_actions);
        let mut rewards = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states * n_actions {
            let mut next: Vec<usize> = (0..n_states).collect();
            // partial Fisher-Yates
            for i in 0..branching {
                let j = rng.random_range(i..n_states);
                next.swap(i, j);
            }
            next.truncate(branching);
            next.sort_unstable();
            let raw: Vec<f64> = (0..branching)
                .map(|_| rng.random_range(0.05..1.0))
                .collect();
            let total: f64 = raw.iter().sum();
            let mut row: Vec<Transition> = next
                .iter()
                .zip(&raw)
                .map(|(&n, &w)| Transition {
                    next: n,
                    prob: w / total,
                })
                .collect();
            renormalize(&mut row);
            rewards.push(
                (0..branching)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            );
            rows.push(row);
        }
        let coords = (0..n_states).map(|s| s as f64).collect();
        Self::from_rows(
            n_actions,
            1,
            coords,
            rows,
            Some(rewards),
            vec![false; n_states],
            Plant::Generic,
        )
    }

    const MAGIC: &'static [u8; 8] = b"SHLBMDP\0";
    const FORMAT_VERSION: u32 = 1;

    /// Writes the numeric tables in a little-endian binary layout.
    ///
    /// The plant description is not stored; callers key cache files on it.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::FORMAT_VERSION.to_le_bytes())?;
        for n in [
            self.n_states,
            self.n_actions,
            self.state_dim,
            self.entries.len(),
        ] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        w.write_all(&[self.native_rewards.is_some() as u8])?;
        for &c in &self.coords {
            w.write_all(&c.to_le_bytes())?;
        }
        for &o in &self.offsets {
            w.write_all(&(o as u64).to_le_bytes())?;
        }
        for t in &self.entries {
            w.write_all(&(t.next as u64).to_le_bytes())?;
            w.write_all(&t.prob.to_le_bytes())?;
        }
        if let Some(nr) = &self.native_rewards {
            for &r in nr {
                w.write_all(&r.to_le_bytes())?;
            }
        }
        for &t in &self.terminal {
            w.write_all(&[t as u8])?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R, plant: Plant) -> Result<Self> {
        let bad = |m: &str| Error::domain(format!("corrupt MDP artifact: {m}"));
        let io = |e: std::io::Error| Error::domain(format!("corrupt MDP artifact: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        if u32::from_le_bytes(b4) != Self::FORMAT_VERSION {
            return Err(bad("unsupported format version"));
        }
        let mut u64_ = || -> Result<usize> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io)?;
            Ok(u64::from_le_bytes(b) as usize)
        };
        let n_states = u64_()?;
        let n_actions = u64_()?;
        let state_dim = u64_()?;
        let n_entries = u64_()?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(io)?;
        let f64s = |n: usize, r: &mut R| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b).map_err(io)?;
                out.push(f64::from_le_bytes(b));
            }
            Ok(out)
        };
        let coords = f64s(n_states * state_dim, &mut r)?;
        let mut offsets = Vec::with_capacity(n_states * n_actions + 1);
        let mut b = [0u8; 8];
        for _ in 0..=n_states * n_actions {
            r.read_exact(&mut b).map_err(io)?;
            offsets.push(u64::from_le_bytes(b) as usize);
        }
        let mut entries = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            r.read_exact(&mut b).map_err(io)?;
            let next = u64::from_le_bytes(b) as usize;
            r.read_exact(&mut b).map_err(io)?;
            entries.push(Transition {
                next,
                prob: f64::from_le_bytes(b),
            });
        }
        let native_rewards = if flag[0] == 1 {
            Some(f64s(n_entries, &mut r)?)
        } else {
            None
        };
        let mut term = vec![0u8; n_states];
        r.read_exact(&mut term).map_err(io)?;
        if offsets.last() != Some(&n_entries) {
            return Err(bad("offset table does not match entry count"));
        }
        let mdp = Self {
            n_states,
            n_actions,
            state_dim,
            coords,
            offsets,
            entries,
            native_rewards,
            terminal: term.into_iter().map(|t| t != 0).collect(),
            plant,
        };
        mdp.validate()?;
        Ok(mdp)
    }
}

/// Forces a row to sum to one by folding the rounding residue into its largest entry.
pub(crate) fn renormalize(row: &mut [Transition]) {
    let sum: f64 = row.iter().map(|t| t.prob).sum();
    if let Some(big) = row.iter_mut().max_by(|a, b| a.prob.total_cmp(&b.prob)) {
        big.prob += 1.0 - sum;
    }
}

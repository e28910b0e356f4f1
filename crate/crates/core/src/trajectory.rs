//! Flattened joint trajectories.
//!
//! A trajectory `(s_0, o_0, a_0, r_0, ..., s_H)` is stored as one real vector.
//! Each timestep contributes `[state | obs agent 0..N | actions agent 0..N |
//! reward]` and the terminal state is appended at the end.

use std::ops::Range;

use crate::error::{check_len, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrajectoryLayout {
    pub horizon: usize,
    pub n_agents: usize,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
}

impl TrajectoryLayout {
    /// Single-step, stateless two-player layout: one dummy observation per
    /// agent, one action per agent and the shared reward.
    pub const fn polynomial_game() -> Self {
        TrajectoryLayout { horizon: 1, n_agents: 2, state_dim: 0, obs_dim: 1, act_dim: 1 }
    }

    fn step_width(&self) -> usize {
        self.state_dim + self.n_agents * (self.obs_dim + self.act_dim) + 1
    }

    /// Total flattened dimension `d_tau`.
    pub fn dim(&self) -> usize {
        self.horizon * self.step_width() + self.state_dim
    }

    fn step_offset(&self, t: usize) -> usize {
        assert!(t < self.horizon, "timestep {t} outside horizon {}", self.horizon);
        t * self.step_width()
    }

    pub fn state_range(&self, t: usize) -> Range<usize> {
        let o = if t == self.horizon { self.horizon * self.step_width() } else { self.step_offset(t) };
        o..o + self.state_dim
    }

    pub fn obs_range(&self, t: usize, agent: usize) -> Range<usize> {
        let o = self.step_offset(t) + self.state_dim + agent * self.obs_dim;
        o..o + self.obs_dim
    }

    pub fn action_range(&self, t: usize, agent: usize) -> Range<usize> {
        let o = self.step_offset(t) + self.state_dim + self.n_agents * self.obs_dim + agent * self.act_dim;
        o..o + self.act_dim
    }

    pub fn reward_index(&self, t: usize) -> usize {
        self.step_offset(t) + self.step_width() - 1
    }

    /// Flat indices of every action coordinate, ordered by (t, agent, dim).
    pub fn action_indices(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.horizon * self.n_agents * self.act_dim);
        for t in 0..self.horizon {
            for i in 0..self.n_agents {
                idx.extend(self.action_range(t, i));
            }
        }
        idx
    }

    pub fn reward_indices(&self) -> Vec<usize> {
        (0..self.horizon).map(|t| self.reward_index(t)).collect()
    }
}

/// One joint trajectory in flattened form.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTrajectory<T> {
    pub layout: TrajectoryLayout,
    pub values: Vec<T>,
}

impl<T: Scalar> JointTrajectory<T> {
    pub fn from_flat(layout: TrajectoryLayout, values: Vec<T>) -> Result<Self> {
        check_len(layout.dim(), values.len())?;
        Ok(JointTrajectory { layout, values })
    }

    /// Builds a horizon-1 polynomial-game record. Observations are the
    /// constant dummy value 0.
    pub fn single_step(ax: T, ay: T, reward: T) -> Self {
        let layout = TrajectoryLayout::polynomial_game();
        let mut values = vec![T::zero(); layout.dim()];
        values[layout.action_range(0, 0).start] = ax;
        values[layout.action_range(0, 1).start] = ay;
        values[layout.reward_index(0)] = reward;
        JointTrajectory { layout, values }
    }

    pub fn action(&self, t: usize, agent: usize) -> &[T] {
        &self.values[self.layout.action_range(t, agent)]
    }

    pub fn obs(&self, t: usize, agent: usize) -> &[T] {
        &self.values[self.layout.obs_range(t, agent)]
    }

    pub fn reward(&self, t: usize) -> T {
        self.values[self.layout.reward_index(t)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_layout_is_obs_obs_act_act_reward() {
        let l = TrajectoryLayout::polynomial_game();
        assert_eq!(l.dim(), 5);
        assert_eq!(l.obs_range(0, 0), 0..1);
        assert_eq!(l.obs_range(0, 1), 1..2);
        assert_eq!(l.action_indices(), vec![2, 3]);
        assert_eq!(l.reward_index(0), 4);
        assert_eq!(l.state_range(1), 5..5);
    }

    #[test]
    fn multi_step_layout_partitions_the_vector() {
        let l = TrajectoryLayout { horizon: 3, n_agents: 2, state_dim: 2, obs_dim: 3, act_dim: 2 };
        let mut seen = vec![0usize; l.dim()];
        for t in 0..l.horizon {
            for i in l.state_range(t) {
                seen[i] += 1;
            }
            for a in 0..l.n_agents {
                for i in l.obs_range(t, a).chain(l.action_range(t, a)) {
                    seen[i] += 1;
                }
            }
            seen[l.reward_index(t)] += 1;
        }
        for i in l.state_range(l.horizon) {
            seen[i] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn single_step_accessors() {
        let tr = JointTrajectory::single_step(0.2f64, -0.7, -0.14);
        assert_eq!(tr.action(0, 0), &[0.2]);
        assert_eq!(tr.action(0, 1), &[-0.7]);
        assert_eq!(tr.obs(0, 1), &[0.0]);
        assert_eq!(tr.reward(0), -0.14);
    }
}

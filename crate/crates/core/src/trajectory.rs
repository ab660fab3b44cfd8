//! Time-indexed rollouts produced by a model.

/// States `s_0..=s_H`, actions `a_0..a_{H-1}` (flat, `action_dim` per step)
/// and rewards `r_0..r_{H-1}`.
///
/// `return_estimate` is `sum_k gamma^k r_k + gamma^H * terminal_value` once
/// the trajectory has been scored; a freshly rolled trajectory carries a zero
/// terminal value and its plain discounted-at-one reward sum.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<S> {
    pub states: Vec<S>,
    pub actions: Vec<f64>,
    pub action_dim: usize,
    pub rewards: Vec<f64>,
    pub terminal_value: f64,
    pub return_estimate: f64,
}

impl<S: Copy> Trajectory<S> {
    pub fn single(state: S, action_dim: usize) -> Self {
        Self {
            states: vec![state],
            actions: Vec::new(),
            action_dim,
            rewards: Vec::new(),
            terminal_value: 0.0,
            return_estimate: 0.0,
        }
    }

    pub fn horizon(&self) -> usize {
        self.rewards.len()
    }

    pub fn action(&self, k: usize) -> &[f64] {
        &self.actions[k * self.action_dim..(k + 1) * self.action_dim]
    }

    pub fn first_state(&self) -> S {
        self.states[0]
    }

    pub fn last_state(&self) -> S {
        *self.states.last().expect("trajectory has a start state")
    }

    /// `sum_k gamma^k r_k + gamma^H * terminal_value`.
    pub fn discounted_return(&self, gamma: f64, terminal_value: f64) -> f64 {
        let mut total = terminal_value;
        for &r in self.rewards.iter().rev() {
            total = r + gamma * total;
        }
        total
    }

    /// Attach a terminal value and recompute the return estimate.
    pub fn score(&mut self, gamma: f64, terminal_value: f64) {
        self.terminal_value = terminal_value;
        self.return_estimate = self.discounted_return(gamma, terminal_value);
    }

    /// Shape check: `|states| = |actions| + 1 = |rewards| + 1`.
    pub fn is_consistent(&self) -> bool {
        self.states.len() == self.rewards.len() + 1
            && self.actions.len() == self.rewards.len() * self.action_dim
    }
}

//! Offline transition data organized by task and trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
}

/// All offline transitions of one task. `task_id == 0` is the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: usize,
    pub state_dim: usize,
    pub n_actions: usize,
    pub trajectories: Vec<Trajectory>,
}

impl TaskDataset {
    pub fn new(task_id: usize, state_dim: usize, n_actions: usize) -> Self {
        TaskDataset {
            task_id,
            state_dim,
            n_actions,
            trajectories: Vec::new(),
        }
    }

    pub fn n_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    pub fn n_samples(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_samples() == 0
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flat_map(|t| t.steps.iter())
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.transitions().fold(0.0, |m, tr| m.max(tr.reward.abs()))
    }

    /// Checks shape consistency of every stored transition.
    pub fn validate(&self) -> Result<()> {
        for (i, traj) in self.trajectories.iter().enumerate() {
            for (t, tr) in traj.steps.iter().enumerate() {
                if tr.state.len() != self.state_dim || tr.next_state.len() != self.state_dim {
                    return Err(Error::Dimension(format!(
                        "task {} trajectory {} step {}: state length {} / {} but state_dim is {}",
                        self.task_id,
                        i,
                        t,
                        tr.state.len(),
                        tr.next_state.len(),
                        self.state_dim
                    )));
                }
                if tr.action >= self.n_actions {
                    return Err(Error::Validation(format!(
                        "task {} trajectory {} step {}: action {} out of range (m = {})",
                        self.task_id, i, t, tr.action, self.n_actions
                    )));
                }
                if !tr.reward.is_finite()
                    || tr.state.iter().chain(&tr.next_state).any(|v| !v.is_finite())
                {
                    return Err(Error::Validation(format!(
                        "task {} trajectory {} step {}: non-finite value",
                        self.task_id, i, t
                    )));
                }
            }
        }
        Ok(())
    }
}

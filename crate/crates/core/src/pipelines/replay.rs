use std::collections::VecDeque;

use rand::Rng;

use crate::error::{DurrError, Result};
use crate::policy::Action;

/// Bounded FIFO experience store with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: VecDeque<T>,
    capacity: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(DurrError::InvalidArgument("replay capacity must be at least 1".into()));
        }
        Ok(Self {
            items: VecDeque::with_capacity(capacity),
            capacity,
        })
    }

    /// Appends, evicting the oldest item when full.
    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// `n` draws with replacement; fails on an empty buffer.
    pub fn sample<'a>(&'a self, n: usize, rng: &mut impl Rng) -> Result<Vec<&'a T>> {
        if self.items.is_empty() {
            return Err(DurrError::InvalidArgument("cannot sample an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect())
    }
}

/// Reference to a stored state: episode, step and the recurrent state fed to the policy there.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub episode: usize,
    pub step: usize,
    pub h: Vec<f32>,
    pub c: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Snapshot,
    pub action: Action,
    pub reward: f64,
    /// Successor state; equals `state` for stop transitions.
    pub next: Snapshot,
    pub terminal: bool,
}

/// `λ (L_prev − L_next)` for continue, zero for stop.
pub fn reward(loss_prev: f64, loss_next: f64, action: Action, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(DurrError::InvalidArgument(format!("reward scale must be positive, got {lambda}")));
    }
    if !(loss_prev >= 0.0 && loss_next >= 0.0) {
        return Err(DurrError::InvalidArgument(format!("losses must be non-negative, got {loss_prev}, {loss_next}")));
    }
    Ok(match action {
        Action::Continue => lambda * (loss_prev - loss_next),
        Action::Stop => 0.0,
    })
}

/// ε-greedy over {continue, stop} with Q(stop) fixed at zero.
pub fn epsilon_greedy(q_continue: f64, epsilon: f64, rng: &mut impl Rng) -> Action {
    if rng.gen::<f64>() < epsilon {
        if rng.gen::<bool>() {
            Action::Continue
        } else {
            Action::Stop
        }
    } else if q_continue > 0.0 {
        Action::Continue
    } else {
        Action::Stop
    }
}

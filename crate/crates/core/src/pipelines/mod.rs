//! Training procedures: supervised restorer training and Q-learning of the stopping policy.

mod config;
mod dqn;
mod replay;
mod schedule;
mod supervised;

pub use config::TrainConfig;
pub use dqn::{greedy_stops, score_stops, train_policy_dqn, train_policy_on_pool, EpisodePool, PolicyLogRow, PolicyRun, PoolScore};
pub use replay::{epsilon_greedy, reward, ReplayBuffer, Snapshot, Transition};
pub use schedule::{Schedule, ScheduleKind};
pub use supervised::{split_validation, train_restorer, train_restorer_from, Plateau, RestorerRun, TrainLogRow};

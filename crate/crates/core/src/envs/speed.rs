//! One-dimensional locomotion where behaviors differ only in cruising speed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{clip, EpisodeConfig, Outcome, Task};

pub const SPEED_GAIN: f64 = 2.0;
pub const SPEED_LIMIT: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedState {
    pub position: f64,
    pub velocity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedTask {
    pub episode: EpisodeConfig,
    /// Strictly increasing cruising speed per behavior.
    pub target_speeds: Vec<f64>,
}

impl Default for SpeedTask {
    fn default() -> Self {
        Self::new(EpisodeConfig::speed(), 8)
    }
}

impl SpeedTask {
    /// `behaviors` speeds `0.25·(j+1)`.
    pub fn new(episode: EpisodeConfig, behaviors: usize) -> Self {
        Self {
            episode,
            target_speeds: (0..behaviors).map(|j| 0.25 * (j + 1) as f64).collect(),
        }
    }

    pub fn speed_expert(&self, s: &SpeedState, behavior: usize) -> f64 {
        clip(
            SPEED_GAIN * (self.target_speeds[behavior] - s.velocity),
            self.episode.action_clip,
        )
    }

    /// Mean velocity over the second half of an episode's visited states.
    pub fn mean_late_speed(&self, visited: &[SpeedState]) -> f64 {
        let n = visited.len();
        let tail = &visited[n / 2..];
        tail.iter().map(|s| s.velocity).sum::<f64>() / tail.len().max(1) as f64
    }
}

impl Task for SpeedTask {
    type State = SpeedState;

    fn name(&self) -> &'static str {
        "speed"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn behaviors(&self) -> usize {
        self.target_speeds.len()
    }

    fn episode(&self) -> &EpisodeConfig {
        &self.episode
    }

    /// At rest at a random position in `[-1, 1]`.
    fn reset(&self, rng: &mut ChaCha8Rng) -> SpeedState {
        SpeedState {
            position: rng.random_range(-1.0..1.0),
            velocity: 0.0,
        }
    }

    fn step(&self, s: &SpeedState, a: &[f64]) -> SpeedState {
        let acc = clip(a[0], self.episode.action_clip);
        let velocity = (s.velocity + self.episode.dt * acc).clamp(-SPEED_LIMIT, SPEED_LIMIT);
        SpeedState {
            position: s.position + self.episode.dt * velocity,
            velocity,
        }
    }

    fn expert(&self, s: &SpeedState, behavior: usize) -> Vec<f64> {
        vec![self.speed_expert(s, behavior)]
    }

    fn observe(&self, s: &SpeedState) -> Vec<f64> {
        vec![s.position, s.velocity]
    }

    /// `visited` excludes the reset state, so its second half is the last
    /// `T/2` post-action states.
    fn outcome(&self, visited: &[SpeedState]) -> Outcome {
        Outcome::Speed(self.mean_late_speed(visited))
    }

    fn accepts(&self, outcome: &Outcome, behavior: usize) -> bool {
        match outcome {
            Outcome::Speed(v) => {
                let target = self.target_speeds[behavior];
                ((v - target) / target).abs() <= 0.05
            }
            Outcome::Reach(_) => false,
        }
    }
}

//! Planar point-mass reaching with one target per quadrant.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{clip, EpisodeConfig, Outcome, Task};

pub const REACH_TARGETS: usize = 4;
/// Proportional gain of the scripted expert.
pub const REACH_GAIN: f64 = 5.0;
/// Targets keep this distance from both axes and from the table edge.
pub const QUADRANT_MARGIN: f64 = 0.2;

/// Quadrant signs in counter-clockwise order starting at `(+, +)`.
const QUADRANT_SIGNS: [[f64; 2]; REACH_TARGETS] = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];

#[derive(Clone, Debug, PartialEq)]
pub struct ReachState {
    pub agent: [f64; 2],
    pub targets: [[f64; 2]; REACH_TARGETS],
}

impl ReachState {
    pub fn distance_to(&self, target: usize) -> f64 {
        let [tx, ty] = self.targets[target];
        (self.agent[0] - tx).hypot(self.agent[1] - ty)
    }
}

/// Index of the quadrant containing `p`, if it is strictly inside one.
pub fn quadrant_of(p: [f64; 2]) -> Option<usize> {
    QUADRANT_SIGNS
        .iter()
        .position(|s| p[0] * s[0] > 0.0 && p[1] * s[1] > 0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReachTask {
    pub episode: EpisodeConfig,
}

impl Default for ReachTask {
    fn default() -> Self {
        Self {
            episode: EpisodeConfig::reach(),
        }
    }
}

impl ReachTask {
    pub fn new(episode: EpisodeConfig) -> Self {
        Self { episode }
    }

    /// Agent at the origin, target `i` uniform inside quadrant `i` shrunk by
    /// the margin.
    pub fn reach_reset(&self, rng: &mut ChaCha8Rng) -> ReachState {
        let lo = QUADRANT_MARGIN;
        let hi = 1.0 - QUADRANT_MARGIN;
        let mut targets = [[0.0; 2]; REACH_TARGETS];
        for (t, s) in targets.iter_mut().zip(QUADRANT_SIGNS) {
            *t = [s[0] * rng.random_range(lo..hi), s[1] * rng.random_range(lo..hi)];
        }
        ReachState {
            agent: [0.0, 0.0],
            targets,
        }
    }

    pub fn reach_step(&self, s: &ReachState, a: &[f64]) -> ReachState {
        let mut next = s.clone();
        for d in 0..2 {
            let v = clip(a[d], self.episode.action_clip);
            next.agent[d] = (s.agent[d] + self.episode.dt * v).clamp(-1.0, 1.0);
        }
        next
    }

    pub fn reach_expert(&self, s: &ReachState, behavior: usize) -> Vec<f64> {
        let target = s.targets[behavior];
        (0..2)
            .map(|d| clip(REACH_GAIN * (target[d] - s.agent[d]), self.episode.action_clip))
            .collect()
    }

    /// Target whose success radius contains the agent, if any.
    pub fn reached(&self, s: &ReachState) -> Option<usize> {
        (0..REACH_TARGETS).find(|&t| s.distance_to(t) <= self.episode.success_radius)
    }
}

impl Task for ReachTask {
    type State = ReachState;

    fn name(&self) -> &'static str {
        "reach"
    }

    fn state_dim(&self) -> usize {
        2 + 2 * REACH_TARGETS
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn behaviors(&self) -> usize {
        REACH_TARGETS
    }

    fn episode(&self) -> &EpisodeConfig {
        &self.episode
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> ReachState {
        self.reach_reset(rng)
    }

    fn step(&self, s: &ReachState, a: &[f64]) -> ReachState {
        self.reach_step(s, a)
    }

    fn expert(&self, s: &ReachState, behavior: usize) -> Vec<f64> {
        self.reach_expert(s, behavior)
    }

    fn observe(&self, s: &ReachState) -> Vec<f64> {
        let mut v = s.agent.to_vec();
        v.extend(s.targets.iter().flatten());
        v
    }

    fn outcome(&self, visited: &[ReachState]) -> Outcome {
        Outcome::Reach(visited.last().and_then(|s| self.reached(s)))
    }

    fn accepts(&self, outcome: &Outcome, behavior: usize) -> bool {
        *outcome == Outcome::Reach(Some(behavior))
    }
}

//! Planar pushing: a square sensor pad pushes a square block along a seeded
//! piecewise-linear waypoint path.
//!
//! Dynamics are quasi-static and translation-only. When the pad penetrates
//! the block deeper than the gel thickness, the block is displaced along the
//! minimum-penetration axis by the excess, so an active push keeps exactly one
//! gel depth of overlap and the tactile imprint stays visible.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{clip_action, Environment, Observation, StepResult};
use crate::error::{Result, SimError};
use crate::image::{quantize_round, Image, Rect, Viewport};
use crate::tactile::{render_contact, Contact, SensorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PushConfig {
    pub arena_size: f64,
    pub block_half_size: f64,
    pub sensor: SensorConfig,
    /// Pusher displacement per step at |action| = 1.
    pub max_speed: f64,
    pub horizon: usize,
    pub image_size: usize,
    pub num_waypoints: usize,
    pub segment_length: f64,
    /// Maximum path heading away from +x, in degrees.
    pub heading_spread_deg: f64,
    /// The next waypoint becomes active once the block is this close.
    pub waypoint_radius: f64,
}

impl Default for PushConfig {
    fn default() -> Self {
        Self {
            arena_size: 1.0,
            block_half_size: 0.1,
            sensor: SensorConfig::default(),
            max_speed: 0.02,
            horizon: 200,
            image_size: 64,
            num_waypoints: 5,
            segment_length: 0.1,
            heading_spread_deg: 30.0,
            waypoint_radius: 0.05,
        }
    }
}

impl PushConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(SimError::Config(format!("push_world: {m}")));
        if !(self.arena_size > 0.0) {
            return fail("arena_size must be positive");
        }
        if !(self.block_half_size > 0.0) || !(self.sensor.half_size > 0.0) {
            return fail("block and sensor sizes must be positive");
        }
        if 2.0 * (self.block_half_size + self.sensor.half_size) + 0.2 * self.arena_size > 0.7 * self.arena_size {
            return fail("block and sensor too large for the arena");
        }
        if !(self.sensor.gel_depth > 0.0) || self.sensor.gel_depth >= self.sensor.half_size {
            return fail("gel_depth must be in (0, sensor half_size)");
        }
        if !(self.max_speed > 0.0) || self.horizon == 0 || self.num_waypoints == 0 {
            return fail("max_speed, horizon and num_waypoints must be positive");
        }
        if self.image_size < 8 {
            return fail("image_size must be at least 8");
        }
        Ok(())
    }

    pub fn diagonal(&self) -> f64 {
        self.arena_size * std::f64::consts::SQRT_2
    }
}

/// Full world state; positions are centres in world units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushState {
    pub pusher: [f64; 2],
    pub block: [f64; 2],
    /// Held at its reset value: pushes never apply torque.
    pub block_orientation: f64,
    pub waypoint_index: usize,
    pub waypoints: Vec<[f64; 2]>,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct PushWorld {
    cfg: PushConfig,
    state: PushState,
}

fn clamp2(p: [f64; 2], lo: f64, hi: f64) -> [f64; 2] {
    p.map(|v| v.clamp(lo, hi))
}

impl PushWorld {
    pub fn new(cfg: PushConfig) -> Result<Self> {
        cfg.validate()?;
        let mut world = Self {
            cfg,
            state: PushState {
                pusher: [0.0; 2],
                block: [0.0; 2],
                block_orientation: 0.0,
                waypoint_index: 0,
                waypoints: vec![],
                steps: 0,
            },
        };
        world.reset(0);
        Ok(world)
    }

    pub fn config(&self) -> &PushConfig {
        &self.cfg
    }

    pub fn state(&self) -> &PushState {
        &self.state
    }

    /// Replaces the world state (positions are clipped to the arena).
    pub fn set_state(&mut self, mut state: PushState) {
        let (hp, hb, l) = (self.cfg.sensor.half_size, self.cfg.block_half_size, self.cfg.arena_size);
        state.pusher = clamp2(state.pusher, hp, l - hp);
        state.block = clamp2(state.block, hb, l - hb);
        self.state = state;
    }

    pub fn block_rect(&self, s: &PushState) -> Rect {
        Rect::centered(s.block[0], s.block[1], self.cfg.block_half_size)
    }

    /// Pad/block overlap rectangle and penetration depth along the contact
    /// normal, or `None` without contact.
    pub fn overlap(&self, s: &PushState) -> Option<(Rect, f64)> {
        let pad = self.cfg.sensor.pad(s.pusher[0], s.pusher[1]);
        let ov = pad.intersect(&self.block_rect(s));
        (ov.area() > 0.0).then(|| (ov, ov.width().min(ov.height())))
    }

    pub fn contact(&self, s: &PushState) -> Contact {
        match self.overlap(s) {
            Some((region, depth)) => Contact::Box { region, depth },
            None => Contact::None,
        }
    }

    pub fn render_tactile(&self, s: &PushState) -> Image {
        render_contact(
            &self.cfg.sensor,
            s.pusher[0],
            s.pusher[1],
            &self.contact(s),
            self.cfg.image_size,
        )
    }

    /// Top-down view: block, pusher and (optionally) the active waypoint.
    pub fn render_visual(&self, s: &PushState, show_waypoint: bool) -> Image {
        let n = self.cfg.image_size;
        let l = self.cfg.arena_size;
        let vp = Viewport {
            window: Rect { x0: 0.0, y0: 0.0, x1: l, y1: l },
            height: n,
            width: n,
        };
        let mut acc = vec![0.0; n * n];
        vp.paint_rect(&self.block_rect(s), 160.0, &mut acc);
        vp.paint_rect(&self.cfg.sensor.pad(s.pusher[0], s.pusher[1]), 90.0, &mut acc);
        if show_waypoint {
            if let Some(w) = s.waypoints.get(s.waypoint_index) {
                // Never thinner than a pixel, or small renders lose the goal.
                let half = (0.02 * l).max(l / n as f64);
                vp.paint_rect(&Rect::centered(w[0], w[1], half), 255.0, &mut acc);
            }
        }
        quantize_round(&acc, n, n)
    }

    pub fn waypoint_distance(&self, s: &PushState) -> f64 {
        let w = s.waypoints[s.waypoint_index];
        (s.block[0] - w[0]).hypot(s.block[1] - w[1])
    }

    fn state_vector(&self, s: &PushState) -> Vec<f64> {
        let w = s.waypoints[s.waypoint_index];
        let contact = if self.overlap(s).is_some() { 1.0 } else { 0.0 };
        vec![s.pusher[0], s.pusher[1], s.block[0], s.block[1], w[0], w[1], contact]
    }

    pub fn observe(&self) -> Observation {
        Observation {
            visual: self.render_visual(&self.state, true),
            tactile: self.render_tactile(&self.state),
            state: self.state_vector(&self.state),
        }
    }

    /// Quasi-static contact resolution after the pusher has moved.
    fn resolve_push(&mut self) {
        let gel = self.cfg.sensor.gel_depth;
        let (hb, hp, l) = (self.cfg.block_half_size, self.cfg.sensor.half_size, self.cfg.arena_size);
        let Some((ov, _)) = self.overlap(&self.state) else { return };
        let s = &mut self.state;
        let axis = if ov.width() <= ov.height() { 0 } else { 1 };
        let depth = ov.width().min(ov.height());
        let sign = if s.block[axis] >= s.pusher[axis] { 1.0 } else { -1.0 };
        let excess = depth - gel;
        if excess > 0.0 {
            s.block[axis] = (s.block[axis] + sign * excess).clamp(hb, l - hb);
            // A wall can stop the block; back the pusher off to one gel depth.
            let gap = (s.block[axis] - s.pusher[axis]).abs();
            let residual = hb + hp - gap - gel;
            if residual > 0.0 {
                s.pusher[axis] = (s.pusher[axis] - sign * residual).clamp(hp, l - hp);
            }
        }
    }

    fn info(&self) -> BTreeMap<String, f64> {
        let s = &self.state;
        let depth = self.overlap(s).map_or(0.0, |o| o.1);
        BTreeMap::from([
            ("distance".to_string(), self.waypoint_distance(s)),
            ("contact".to_string(), if depth > 0.0 { 1.0 } else { 0.0 }),
            ("depth".to_string(), depth),
            ("waypoint_index".to_string(), s.waypoint_index as f64),
        ])
    }
}

impl Environment for PushWorld {
    fn reset(&mut self, seed: u64) -> Observation {
        let c = self.cfg;
        let l = c.arena_size;
        let (hb, hp) = (c.block_half_size, c.sensor.half_size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = [
            rng.gen_range(hb + 2.0 * hp + 0.06 * l..=0.42 * l),
            rng.gen_range(0.3 * l..=0.7 * l),
        ];
        let gap = rng.gen_range(0.01 * l..=0.04 * l);
        let pusher = clamp2(
            [block[0] - hb - hp - gap, block[1] + rng.gen_range(-0.03 * l..=0.03 * l)],
            hp,
            l - hp,
        );
        let spread = c.heading_spread_deg.to_radians();
        let mut heading: f64 = if spread > 0.0 { rng.gen_range(-spread..=spread) } else { 0.0 };
        let mut p = block;
        let mut waypoints = Vec::with_capacity(c.num_waypoints);
        for i in 0..c.num_waypoints {
            if i > 0 && spread > 0.0 {
                heading = (heading + rng.gen_range(-0.5 * spread..=0.5 * spread)).clamp(-spread, spread);
            }
            p = clamp2(
                [p[0] + c.segment_length * l * heading.cos(), p[1] + c.segment_length * l * heading.sin()],
                hb,
                l - hb,
            );
            waypoints.push(p);
        }
        self.state = PushState {
            pusher,
            block,
            block_orientation: 0.0,
            waypoint_index: 0,
            waypoints,
            steps: 0,
        };
        self.observe()
    }

    fn step(&mut self, action: [f64; 2]) -> Result<StepResult> {
        if self.state.steps >= self.cfg.horizon {
            return Err(SimError::Contract("step called after episode end".into()));
        }
        let a = clip_action(action);
        let hp = self.cfg.sensor.half_size;
        let l = self.cfg.arena_size;
        let s = &mut self.state;
        s.pusher = clamp2(
            [s.pusher[0] + a[0] * self.cfg.max_speed, s.pusher[1] + a[1] * self.cfg.max_speed],
            hp,
            l - hp,
        );
        self.resolve_push();

        let distance = self.waypoint_distance(&self.state);
        let reward = 0.0 - distance / self.cfg.diagonal();
        let info = self.info();
        let s = &mut self.state;
        if distance < self.cfg.waypoint_radius * l && s.waypoint_index + 1 < s.waypoints.len() {
            s.waypoint_index += 1;
        }
        s.steps += 1;
        let done = s.steps >= self.cfg.horizon;
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done,
            info,
        })
    }

    fn state_dim(&self) -> usize {
        7
    }

    fn image_size(&self) -> usize {
        self.cfg.image_size
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> PushWorld {
        PushWorld::new(PushConfig::default()).unwrap()
    }

    #[test]
    fn reset_is_deterministic_and_contact_free() {
        let mut w = world();
        for seed in 0..50 {
            let a = w.reset(seed);
            let b = w.reset(seed);
            assert_eq!(a, b);
            // Geometric oracle: pad and block rectangles are disjoint.
            let s = w.state();
            let gap_x = (s.block[0] - s.pusher[0]).abs() - 0.1 - 0.075;
            assert!(gap_x > 0.0);
            assert!(a.tactile.is_blank());
        }
    }

    #[test]
    fn null_action_changes_nothing() {
        let mut w = world();
        w.reset(3);
        let first = w.step([0.0, 0.0]).unwrap();
        let block = w.state().block;
        let second = w.step([0.0, 0.0]).unwrap();
        assert_eq!(w.state().block, block);
        assert_eq!(first.reward, second.reward);
    }

    #[test]
    fn block_on_waypoint_scores_zero() {
        let mut w = world();
        w.reset(1);
        let mut s = w.state().clone();
        s.waypoint_index = s.waypoints.len() - 1;
        s.block = s.waypoints[s.waypoint_index];
        s.pusher = [0.1, 0.9];
        w.set_state(s);
        let r = w.step([0.0, 0.0]).unwrap();
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn pushing_from_left_moves_block_right() {
        let mut w = world();
        w.reset(7);
        let x0 = w.state().block[0];
        let mut moved = false;
        for _ in 0..10 {
            let r = w.step([1.0, 0.0]).unwrap();
            assert!(r.reward <= 0.0);
            moved |= w.state().block[0] > x0;
        }
        assert!(w.state().block[0] > x0);
        assert!(moved);
        // While pushing, the overlap equals one gel depth.
        let (_, depth) = w.overlap(w.state()).unwrap();
        assert!((depth - w.config().sensor.gel_depth).abs() < 1e-9);
        assert!(!w.observe().tactile.is_blank());
    }

    #[test]
    fn episode_ends_at_horizon() {
        let mut w = PushWorld::new(PushConfig {
            horizon: 5,
            ..PushConfig::default()
        })
        .unwrap();
        w.reset(0);
        for i in 0..5 {
            let r = w.step([0.3, -0.2]).unwrap();
            assert_eq!(r.done, i == 4);
        }
        assert!(matches!(w.step([0.0, 0.0]), Err(SimError::Contract(_))));
    }

    #[test]
    fn wall_stops_block_and_pusher() {
        let mut w = world();
        w.reset(2);
        let mut s = w.state().clone();
        s.block = [0.9, 0.5];
        s.pusher = [0.9 - 0.1 - 0.075 + 0.005, 0.5];
        w.set_state(s);
        for _ in 0..20 {
            w.step([1.0, 0.0]).unwrap();
            let st = w.state();
            assert!(st.block[0] <= 0.9 + 1e-12);
            let (_, d) = w.overlap(st).unwrap();
            assert!(d <= w.config().sensor.gel_depth + 1e-9);
        }
    }

    #[test]
    fn waypoint_stays_visible_in_small_renders() {
        for n in [16, 32, 64] {
            let mut w = PushWorld::new(PushConfig {
                image_size: n,
                ..PushConfig::default()
            })
            .unwrap();
            let obs = w.reset(4);
            let hidden = w.render_visual(w.state(), false);
            assert!(obs.visual.pixels.contains(&255), "n = {n}");
            assert!(!hidden.pixels.contains(&255));
        }
    }
}

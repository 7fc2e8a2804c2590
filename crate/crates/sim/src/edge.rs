//! Edge following: keep a straight surface edge of random orientation centred
//! under the sensor pad.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{clip_action, Environment, Observation, StepResult};
use crate::error::{Result, SimError};
use crate::image::{quantize_round, rect_halfplane_area, HalfPlane, Image, Rect, Viewport};
use crate::tactile::{render_contact, Contact, SensorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgeConfig {
    pub arena_size: f64,
    pub sensor: SensorConfig,
    pub max_speed: f64,
    pub horizon: usize,
    pub image_size: usize,
    /// Initial lateral offset is drawn from `±start_offset · half_size`.
    pub start_offset: f64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            arena_size: 1.0,
            sensor: SensorConfig::default(),
            max_speed: 0.02,
            horizon: 200,
            image_size: 64,
            start_offset: 0.5,
        }
    }
}

impl EdgeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(SimError::Config(format!("edge_follow: {m}")));
        if !(self.arena_size > 0.0) || !(self.sensor.half_size > 0.0) || self.sensor.half_size * 4.0 > self.arena_size {
            return fail("sensor must be positive and fit the arena");
        }
        if !(self.max_speed > 0.0) || self.horizon == 0 || self.image_size < 8 {
            return fail("max_speed, horizon and image_size must be positive (image_size >= 8)");
        }
        if !(0.0..=1.0).contains(&self.start_offset) {
            return fail("start_offset must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeState {
    pub sensor: [f64; 2],
    /// Edge direction in radians, `[0, 2π)`.
    pub edge_angle: f64,
    /// A point on the edge.
    pub edge_point: [f64; 2],
    pub steps: usize,
}

impl EdgeState {
    /// The surface: points on the right of the edge direction.
    pub fn surface(&self) -> HalfPlane {
        let (nx, ny) = (-self.edge_angle.sin(), self.edge_angle.cos());
        HalfPlane {
            nx,
            ny,
            c: nx * self.edge_point[0] + ny * self.edge_point[1],
        }
    }

    pub fn lateral_offset(&self) -> f64 {
        self.surface().signed_distance(self.sensor[0], self.sensor[1])
    }
}

#[derive(Debug, Clone)]
pub struct EdgeFollow {
    cfg: EdgeConfig,
    state: EdgeState,
}

impl EdgeFollow {
    pub fn new(cfg: EdgeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut env = Self {
            cfg,
            state: EdgeState {
                sensor: [0.0; 2],
                edge_angle: 0.0,
                edge_point: [0.0; 2],
                steps: 0,
            },
        };
        env.reset(0);
        Ok(env)
    }

    pub fn state(&self) -> &EdgeState {
        &self.state
    }

    pub fn set_state(&mut self, state: EdgeState) {
        self.state = state;
    }

    pub fn contact_area(&self, s: &EdgeState) -> f64 {
        rect_halfplane_area(&self.cfg.sensor.pad(s.sensor[0], s.sensor[1]), &s.surface())
    }

    pub fn render_tactile(&self, s: &EdgeState) -> Image {
        let contact = if self.contact_area(s) > 0.0 {
            Contact::Surface {
                surface: s.surface(),
                depth: self.cfg.sensor.gel_depth,
            }
        } else {
            Contact::None
        };
        render_contact(&self.cfg.sensor, s.sensor[0], s.sensor[1], &contact, self.cfg.image_size)
    }

    pub fn render_visual(&self, s: &EdgeState) -> Image {
        let n = self.cfg.image_size;
        let l = self.cfg.arena_size;
        let vp = Viewport {
            window: Rect { x0: 0.0, y0: 0.0, x1: l, y1: l },
            height: n,
            width: n,
        };
        let mut acc = vec![0.0; n * n];
        vp.paint_halfplane(&s.surface(), 120.0, &mut acc);
        vp.paint_rect(&self.cfg.sensor.pad(s.sensor[0], s.sensor[1]), 220.0, &mut acc);
        quantize_round(&acc, n, n)
    }

    fn observe(&self) -> Observation {
        let s = &self.state;
        Observation {
            visual: self.render_visual(s),
            tactile: self.render_tactile(s),
            state: vec![
                s.sensor[0],
                s.sensor[1],
                s.edge_angle.cos(),
                s.edge_angle.sin(),
                s.lateral_offset() / self.cfg.sensor.half_size,
            ],
        }
    }
}

impl Environment for EdgeFollow {
    fn reset(&mut self, seed: u64) -> Observation {
        let c = self.cfg;
        let l = c.arena_size;
        let hp = c.sensor.half_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let edge_angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let edge_point = [0.5 * l, 0.5 * l];
        let (dx, dy) = (edge_angle.cos(), edge_angle.sin());
        let (nx, ny) = (-dy, dx);
        let lateral = if c.start_offset > 0.0 {
            rng.gen_range(-c.start_offset..=c.start_offset) * hp
        } else {
            0.0
        };
        let along = rng.gen_range(-0.2..=0.2) * l;
        let sensor = [
            (edge_point[0] + nx * lateral + dx * along).clamp(hp, l - hp),
            (edge_point[1] + ny * lateral + dy * along).clamp(hp, l - hp),
        ];
        self.state = EdgeState {
            sensor,
            edge_angle,
            edge_point,
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
        for (p, d) in s.sensor.iter_mut().zip(a) {
            *p = (*p + d * self.cfg.max_speed).clamp(hp, l - hp);
        }
        s.steps += 1;
        let offset = s.lateral_offset();
        let reward = 0.0 - offset.abs() / hp;
        let done = s.steps >= self.cfg.horizon;
        let info = BTreeMap::from([
            ("offset".to_string(), offset),
            (
                "contact".to_string(),
                if self.contact_area(&self.state) > 0.0 { 1.0 } else { 0.0 },
            ),
        ]);
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done,
            info,
        })
    }

    fn state_dim(&self) -> usize {
        5
    }

    fn image_size(&self) -> usize {
        self.cfg.image_size
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }
}

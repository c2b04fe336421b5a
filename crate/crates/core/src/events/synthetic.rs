//! Synthetic event source driven by the log-brightness contrast model.
//!
//! Each scene defines a log-intensity field `L(x, y, t)`. The field is
//! sampled at pixel centers every [`MICRO_STEP_US`]; a pixel emits an event
//! of polarity `p` whenever its log intensity has moved by at least `C` in
//! direction `p` since the reference level set by its previous event.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Event, EventStream, SensorGeometry};
use crate::error::{Error, Result};

/// Sampling interval of the log-intensity field.
pub const MICRO_STEP_US: u64 = 100;

/// Built-in scenes. Positions and velocities are in pixels and pixels/second.
#[derive(Clone, Debug, PartialEq)]
pub enum Scene {
    /// Vertical bar of constant log-contrast `step` translating along x.
    Bar {
        width: f64,
        step: f64,
        start_x: f64,
        velocity: f64,
    },
    /// Gaussian bump in log intensity drifting with constant velocity.
    Blob {
        center: (f64, f64),
        velocity: (f64, f64),
        sigma: f64,
        amplitude: f64,
    },
    /// Hard-edged discs sharing one velocity.
    Dots {
        centers: Vec<(f64, f64)>,
        radius: f64,
        step: f64,
        velocity: (f64, f64),
    },
}

impl Scene {
    pub const NAMES: [&'static str; 3] = ["bar", "blob", "dots"];

    /// Default parameterization of a named scene for a sensor and duration.
    pub fn from_name(
        name: &str,
        geometry: SensorGeometry,
        duration_us: u64,
        seed: u64,
    ) -> Result<Self> {
        let w = f64::from(geometry.width);
        let h = f64::from(geometry.height);
        let secs = (duration_us.max(1)) as f64 * 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match name {
            "bar" => {
                let width = (w / 8.0).max(2.0);
                Ok(Scene::Bar {
                    width,
                    step: 0.5,
                    start_x: -width,
                    velocity: (w + width) / secs,
                })
            }
            "blob" => {
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let speed = 0.25 * w / secs;
                Ok(Scene::Blob {
                    center: (rng.gen_range(0.3 * w..0.7 * w), rng.gen_range(0.3 * h..0.7 * h)),
                    velocity: (speed * angle.cos(), speed * angle.sin()),
                    sigma: (w.min(h) / 12.0).max(2.0),
                    amplitude: 1.0,
                })
            }
            "dots" => {
                let centers = (0..24)
                    .map(|_| (rng.gen_range(0.0..w), rng.gen_range(0.0..h)))
                    .collect();
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let speed = 0.125 * w / secs;
                Ok(Scene::Dots {
                    centers,
                    radius: 2.0,
                    step: 0.6,
                    velocity: (speed * angle.cos(), speed * angle.sin()),
                })
            }
            other => Err(Error::UnknownPattern(other.to_string())),
        }
    }

    /// Same scene with all motion removed.
    pub fn frozen(mut self) -> Self {
        match &mut self {
            Scene::Bar { velocity, .. } => *velocity = 0.0,
            Scene::Blob { velocity, .. } | Scene::Dots { velocity, .. } => *velocity = (0.0, 0.0),
        }
        self
    }

    /// Fills `out` (row-major, one value per pixel) with `L` at time `t_us`.
    fn render(&self, geometry: SensorGeometry, t_us: u64, out: &mut [f64]) {
        let w = geometry.width as usize;
        let h = geometry.height as usize;
        let ts = t_us as f64 * 1e-6;
        match self {
            Scene::Bar {
                width,
                step,
                start_x,
                velocity,
            } => {
                let left = start_x + velocity * ts;
                for x in 0..w {
                    let cx = x as f64 + 0.5;
                    let v = if cx >= left && cx < left + width { *step } else { 0.0 };
                    for y in 0..h {
                        out[y * w + x] = v;
                    }
                }
            }
            Scene::Blob {
                center,
                velocity,
                sigma,
                amplitude,
            } => {
                let (mx, my) = (center.0 + velocity.0 * ts, center.1 + velocity.1 * ts);
                let inv = 1.0 / (2.0 * sigma * sigma);
                for y in 0..h {
                    let dy = y as f64 + 0.5 - my;
                    for x in 0..w {
                        let dx = x as f64 + 0.5 - mx;
                        out[y * w + x] = amplitude * (-(dx * dx + dy * dy) * inv).exp();
                    }
                }
            }
            Scene::Dots {
                centers,
                radius,
                step,
                velocity,
            } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                let r2 = radius * radius;
                for &(cx0, cy0) in centers {
                    let (cx, cy) = (cx0 + velocity.0 * ts, cy0 + velocity.1 * ts);
                    let x0 = ((cx - radius).floor().max(0.0)) as usize;
                    let y0 = ((cy - radius).floor().max(0.0)) as usize;
                    let x1 = ((cx + radius).ceil()).min(w as f64);
                    let y1 = ((cy + radius).ceil()).min(h as f64);
                    if x1 <= 0.0 || y1 <= 0.0 {
                        continue;
                    }
                    for y in y0..(y1 as usize) {
                        for x in x0..(x1 as usize) {
                            let dx = x as f64 + 0.5 - cx;
                            let dy = y as f64 + 0.5 - cy;
                            if dx * dx + dy * dy <= r2 {
                                out[y * w + x] = *step;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Simulates a contrast-threshold sensor observing `scene` for `duration_us`.
///
/// Crossing times inside a micro-step are linearly interpolated and rounded
/// up to whole microseconds. Output is sorted by `(t, y, x)` with emission
/// order breaking remaining ties, so the result is a pure function of its
/// arguments.
pub fn generate_synthetic(
    geometry: SensorGeometry,
    scene: &Scene,
    contrast: f64,
    duration_us: u64,
) -> Result<EventStream> {
    if !contrast.is_finite() || contrast <= 0.0 {
        return Err(Error::InvalidStream(format!(
            "contrast threshold must be positive, got {contrast}"
        )));
    }
    let n = geometry.width as usize * geometry.height as usize;
    let mut reference = vec![0.0; n];
    let mut prev = vec![0.0; n];
    let mut now = vec![0.0; n];
    scene.render(geometry, 0, &mut reference);
    prev.copy_from_slice(&reference);

    let w = geometry.width as usize;
    let mut raw: Vec<(u64, u16, u16, u32, i8)> = Vec::new();
    let mut seq = 0u32;
    let steps = duration_us / MICRO_STEP_US;
    for k in 1..=steps {
        let t0 = (k - 1) * MICRO_STEP_US;
        scene.render(geometry, k * MICRO_STEP_US, &mut now);
        for i in 0..n {
            let (l0, l1) = (prev[i], now[i]);
            if l1 == l0 {
                continue;
            }
            let p: i8 = if l1 > reference[i] { 1 } else { -1 };
            let sign = f64::from(p);
            while sign * (l1 - reference[i]) >= contrast {
                let level = reference[i] + sign * contrast;
                let frac = ((level - l0) / (l1 - l0)).clamp(0.0, 1.0);
                let dt = ((frac * MICRO_STEP_US as f64).ceil() as u64).clamp(1, MICRO_STEP_US);
                raw.push((t0 + dt, (i / w) as u16, (i % w) as u16, seq, p));
                seq += 1;
                reference[i] = level;
            }
        }
        std::mem::swap(&mut prev, &mut now);
    }
    raw.sort_unstable_by_key(|&(t, y, x, s, _)| (t, y, x, s));
    let events = raw
        .into_iter()
        .map(|(t, y, x, _, p)| Event { x, y, t, p })
        .collect();
    EventStream::new(geometry, events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g16() -> SensorGeometry {
        SensorGeometry::new(16, 16).unwrap()
    }

    #[test]
    fn static_scenes_are_silent() {
        for name in Scene::NAMES {
            let scene = Scene::from_name(name, g16(), 20_000, 3).unwrap().frozen();
            let s = generate_synthetic(g16(), &scene, 0.1, 20_000).unwrap();
            assert!(s.is_empty(), "{name}");
        }
    }

    #[test]
    fn unknown_pattern() {
        assert!(matches!(
            Scene::from_name("spiral", g16(), 1000, 0),
            Err(Error::UnknownPattern(_))
        ));
    }

    #[test]
    fn rejects_nonpositive_contrast() {
        let scene = Scene::from_name("bar", g16(), 1000, 0).unwrap();
        assert!(generate_synthetic(g16(), &scene, 0.0, 1000).is_err());
    }

    #[test]
    fn bar_sweep_emits_one_event_per_edge_per_pixel() {
        let g = g16();
        let duration = 18_000;
        let scene = Scene::from_name("bar", g, duration, 0).unwrap();
        let Scene::Bar { width, step, start_x, velocity } = scene else {
            unreachable!()
        };
        let s = generate_synthetic(g, &scene, step, duration).unwrap();

        // Sample each pixel center at every step; the contrast step equals C,
        // so an event fires exactly at the first sample past each edge.
        let mut expected = Vec::new();
        for y in 0..16u16 {
            for x in 0..16u16 {
                let cx = f64::from(x) + 0.5;
                let mut inside = false;
                for k in 1..=duration / MICRO_STEP_US {
                    let t = k * MICRO_STEP_US;
                    let left = start_x + velocity * (t as f64 * 1e-6);
                    let now = cx >= left && cx < left + width;
                    if now != inside {
                        expected.push(Event::new(x, y, t, if now { 1 } else { -1 }));
                        inside = now;
                    }
                }
            }
        }
        let key = |e: &Event| (e.t, e.y, e.x);
        expected.sort_by_key(key);
        assert_eq!(expected.len(), 2 * 256);
        assert_eq!(s.events, expected);
    }

    #[test]
    fn generation_is_deterministic() {
        for name in Scene::NAMES {
            let scene = Scene::from_name(name, g16(), 30_000, 9).unwrap();
            let a = generate_synthetic(g16(), &scene, 0.15, 30_000).unwrap();
            let again = Scene::from_name(name, g16(), 30_000, 9).unwrap();
            let b = generate_synthetic(g16(), &again, 0.15, 30_000).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn doubling_contrast_never_adds_events() {
        for name in Scene::NAMES {
            let scene = Scene::from_name(name, g16(), 40_000, 2).unwrap();
            let mut c = 0.05;
            let mut last = usize::MAX;
            for _ in 0..5 {
                let n = generate_synthetic(g16(), &scene, c, 40_000).unwrap().len();
                assert!(n <= last, "{name}: {n} events at C={c}, {last} before");
                last = n;
                c *= 2.0;
            }
        }
    }
}

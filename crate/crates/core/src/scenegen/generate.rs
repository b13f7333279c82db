use diffmath::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dilate::{project_and_dilate, PointImage};
use super::{
    MultimodalSample, PanopticMap, SceneConfig, SparseDepthMap, TimeOfDay, Weather, VOID_CLASS,
    VOID_INSTANCE,
};
use crate::error::Result;

pub const CLASS_NAMES: [&str; 8] = [
    "road",
    "sidewalk",
    "building",
    "vegetation",
    "sky",
    "car",
    "person",
    "pole",
];
pub const THING_CLASSES: [u16; 3] = [CAR, PERSON, POLE];

const ROAD: u16 = 0;
const SIDEWALK: u16 = 1;
const BUILDING: u16 = 2;
const VEGETATION: u16 = 3;
const SKY: u16 = 4;
const CAR: u16 = 5;
const PERSON: u16 = 6;
const POLE: u16 = 7;

const CAMERA_HEIGHT: f64 = 1.5;

const CAR_COLORS: [[f64; 3]; 5] = [
    [0.75, 0.12, 0.10],
    [0.12, 0.22, 0.70],
    [0.85, 0.85, 0.85],
    [0.10, 0.10, 0.12],
    [0.55, 0.38, 0.30],
];

struct Canvas {
    h: usize,
    w: usize,
    depth: Vec<f64>,
    class: Vec<u16>,
    inst: Vec<u16>,
    color: Vec<[f64; 3]>,
}

impl Canvas {
    fn paint(&mut self, y: usize, x: usize, depth: f64, class: u16, inst: u16, color: [f64; 3]) {
        let i = y * self.w + x;
        self.depth[i] = depth;
        self.class[i] = class;
        self.inst[i] = inst;
        self.color[i] = color;
    }
}

struct Thing {
    class: u16,
    depth: f64,
    lateral: f64,
    size: (f64, f64),
    color: [f64; 3],
}

fn jitter_color(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// Render one scene. Fully determined by `(cfg, seed)`; the condition is
/// taken from [`SceneConfig::condition_for_seed`].
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<MultimodalSample> {
    cfg.validate()?;
    let condition = cfg.condition_for_seed(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED_D6F5);
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    let mut cv = Canvas {
        h,
        w,
        depth: vec![cfg.d_max; n],
        class: vec![SKY; n],
        inst: vec![1; n],
        color: vec![[0.0; 3]; n],
    };

    let focal = 0.9 * w as f64;
    let horizon = (h as f64 * rng.random_range(0.36..0.46)).round() as usize;
    let cx = w as f64 * (0.5 + rng.random_range(-0.1..0.1));
    let road_half = rng.random_range(3.5..5.0);
    let walk_outer = road_half + rng.random_range(2.0..3.0);
    let ground_depth = |y: usize| {
        (focal * CAMERA_HEIGHT / (y as f64 - horizon as f64 + 1.0)).clamp(cfg.d_min, cfg.d_max)
    };
    let ground_row = |d: f64| horizon as f64 - 1.0 + focal * CAMERA_HEIGHT / d;
    let col_of = |lateral: f64, d: f64| cx + focal * lateral / d;

    // Sky and ground.
    let sky_top = [0.45, 0.62, 0.92];
    let road_color = jitter_color(&mut rng, [0.33, 0.33, 0.36], 0.04);
    let walk_color = jitter_color(&mut rng, [0.62, 0.58, 0.52], 0.04);
    let veg_color = jitter_color(&mut rng, [0.22, 0.50, 0.20], 0.04);
    for y in 0..h {
        for x in 0..w {
            if y < horizon {
                let t = y as f64 / horizon.max(1) as f64;
                let c = [sky_top[0] + 0.25 * t, sky_top[1] + 0.2 * t, sky_top[2]];
                cv.paint(y, x, cfg.d_max, SKY, 1, c);
                continue;
            }
            let d = ground_depth(y);
            let lateral = ((x as f64 + 0.5) - cx) * d / focal;
            let (class, mut color) = if lateral.abs() <= road_half {
                (ROAD, road_color)
            } else if lateral.abs() <= walk_outer {
                (SIDEWALK, walk_color)
            } else {
                (VEGETATION, veg_color)
            };
            // dashed centre line
            if class == ROAD
                && lateral.abs() < 0.12 * d.max(4.0) / 4.0
                && (d.ln() * 4.0) as i64 % 2 == 0
            {
                color = [0.9, 0.9, 0.85];
            }
            cv.paint(y, x, d, class, 1, color);
        }
    }

    // Building facades behind the sidewalks.
    for side in [-1.0, 1.0] {
        if rng.random_bool(0.15) {
            continue;
        }
        let d = rng.random_range(20.0..55.0);
        let height_m = rng.random_range(8.0..22.0);
        let base = jitter_color(&mut rng, [0.55, 0.40, 0.32], 0.06);
        let setback = rng.random_range(0.5..3.0);
        let edge = col_of(side * (walk_outer + setback), d);
        let (x0, x1) = if side < 0.0 {
            (0.0, edge)
        } else {
            (edge, w as f64)
        };
        let y1 = ground_row(d);
        let y0 = y1 - focal * height_m / d;
        fill_box(&mut cv, x0, x1, y0, y1, |_, _, u, v| {
            let win = ((u * 6.0).fract() > 0.55) && ((v * 5.0).fract() > 0.5);
            let c = if win { base.map(|c| c * 0.55) } else { base };
            Some((d, BUILDING, 1, c))
        });
    }

    // Trees along the sidewalk edges.
    let n_trees = rng.random_range(0..=3);
    for _ in 0..n_trees {
        let side = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let d = rng.random_range(8.0..40.0);
        let lateral = side * (walk_outer + rng.random_range(0.5..2.0));
        let px = col_of(lateral, d);
        let py = ground_row(d) - focal * 3.0 / d;
        let r = focal * 1.8 / d;
        let c = jitter_color(&mut rng, [0.16, 0.42, 0.14], 0.05);
        fill_box(&mut cv, px - r, px + r, py - r, py + r, |x, y, _, _| {
            let (dx, dy) = (x + 0.5 - px, y + 0.5 - py);
            (dx * dx + dy * dy <= r * r).then_some((d, VEGETATION, 1, c))
        });
    }

    // Things.
    let n_things = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut things = Vec::new();
    while things.len() < n_things {
        let roll: f64 = rng.random();
        let thing = if roll < 0.55 {
            let d = rng.random_range(4.0..30.0);
            let lateral = rng.random_range(-(road_half - 1.2)..(road_half - 1.2));
            let base = CAR_COLORS[rng.random_range(0..CAR_COLORS.len())];
            let color = jitter_color(&mut rng, base, 0.05);
            let size = (
                2.4 * rng.random_range(0.9..1.1),
                1.7 * rng.random_range(0.9..1.1),
            );
            Thing {
                class: CAR,
                depth: d,
                lateral,
                size,
                color,
            }
        } else if roll < 0.8 {
            let d = rng.random_range(4.0..20.0);
            let side = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
            let lateral = side * rng.random_range(road_half + 0.5..walk_outer - 0.5);
            let color = jitter_color(&mut rng, [0.85, 0.55, 0.30], 0.08);
            Thing {
                class: PERSON,
                depth: d,
                lateral,
                size: (1.1, 1.9),
                color,
            }
        } else {
            let d = rng.random_range(4.0..25.0);
            let side = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
            let lateral = side * (walk_outer - 0.3);
            let color = jitter_color(&mut rng, [0.75, 0.75, 0.20], 0.05);
            Thing {
                class: POLE,
                depth: d,
                lateral,
                size: (0.6, 5.0),
                color,
            }
        };
        // Occasionally park a second car flush against the first.
        let twin = (thing.class == CAR && rng.random_bool(0.3)).then(|| Thing {
            lateral: thing.lateral + thing.size.0,
            color: {
                let base = CAR_COLORS[rng.random_range(0..CAR_COLORS.len())];
                jitter_color(&mut rng, base, 0.05)
            },
            ..thing
        });
        things.push(thing);
        things.extend(twin);
    }
    things.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    let mut next_id = [1u16; 8];
    let mut boxes = Vec::new();
    let jitter = cfg.object_depth_jitter;
    for t in &things {
        let id = next_id[t.class as usize];
        next_id[t.class as usize] += 1;
        let x0 = col_of(t.lateral - t.size.0 / 2.0, t.depth);
        let x1 = col_of(t.lateral + t.size.0 / 2.0, t.depth);
        let y1 = ground_row(t.depth);
        let y0 = y1 - focal * t.size.1 / t.depth;
        let (d, class, color) = (t.depth, t.class, t.color);
        fill_box(&mut cv, x0, x1, y0, y1, |_, _, u, _| {
            // Fronto-parallel with a slight tilt, strictly inside the jitter bound.
            Some((
                (d + 0.98 * jitter * (u - 0.5)).clamp(cfg.d_min, cfg.d_max),
                class,
                id,
                color,
            ))
        });
        boxes.push((t.class, id, t.depth, (x0 + x1) / 2.0, y0 + 0.6 * (y1 - y0)));
    }

    // Unlabelled ego-vehicle hood.
    if rng.random_bool(0.5) {
        let rows = (h / 16).max(1);
        let (x0, x1) = (w / 4, 3 * w / 4);
        for y in h - rows..h {
            for x in x0..x1 {
                cv.paint(
                    y,
                    x,
                    1.5f64.max(cfg.d_min),
                    VOID_CLASS,
                    VOID_INSTANCE,
                    [0.12, 0.12, 0.12],
                );
            }
        }
    }

    // Camera image with weather, then events, then night.
    let mut rgb: Vec<[f64; 3]> = cv
        .color
        .iter()
        .map(|c| {
            c.map(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + 0.02 * z
            })
        })
        .collect();
    match condition.weather {
        Weather::Clear => {}
        Weather::Fog => {
            for (px, &d) in rgb.iter_mut().zip(&cv.depth) {
                let t = (-d / cfg.fog_visibility).exp();
                *px = px.map(|v| v * t + 0.72 * (1.0 - t));
            }
        }
        Weather::Rain => {
            for px in rgb.iter_mut() {
                *px = [px[0] * 0.8 - 0.02, px[1] * 0.8, px[2] * 0.8 + 0.04];
            }
            for _ in 0..w / 3 {
                let x = rng.random_range(0..w);
                let len = h / 6;
                let y0 = rng.random_range(0..h - len);
                for y in y0..y0 + len {
                    let px = &mut rgb[y * w + x];
                    *px = px.map(|v| v + 0.12);
                }
            }
        }
        Weather::Snow => {
            for px in rgb.iter_mut() {
                *px = px.map(|v| 0.78 * v + 0.22 * 0.92);
                if rng.random_bool(0.03) {
                    *px = [0.95; 3];
                }
            }
        }
    }
    for px in rgb.iter_mut() {
        *px = px.map(|v| v.clamp(0.0, 1.0));
    }

    let mut events = PointImage::empty(h, w);
    let intensity: Vec<f64> = rgb.iter().map(|c| (c[0] + c[1] + c[2]) / 3.0).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let gx = if x + 1 < w {
                intensity[i + 1] - intensity[i]
            } else {
                0.0
            };
            let gy = if y + 1 < h {
                intensity[i + w] - intensity[i]
            } else {
                0.0
            };
            if gx.abs() + gy.abs() > 0.1 {
                events.set(
                    y,
                    x,
                    [(3.0 * gx.abs()).min(1.0), (3.0 * gy.abs()).min(1.0), 1.0],
                );
            }
        }
    }

    if condition.time == TimeOfDay::Night {
        for px in rgb.iter_mut() {
            *px = px.map(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (v * cfg.night_gain + 0.01 * z).clamp(0.0, 1.0)
            });
        }
    }

    // Lidar on scanlines.
    let wi = condition.weather.index();
    let (beta, sigma, outlier) = (
        cfg.lidar_beta[wi],
        cfg.lidar_sigma[wi],
        cfg.lidar_outlier[wi],
    );
    let phase = rng.random_range(0..cfg.lidar_row_step);
    let mut lidar_depth = vec![0.0; n];
    let mut lidar_valid = vec![false; n];
    for y in (phase..h).step_by(cfg.lidar_row_step) {
        for x in 0..w {
            let i = y * w + x;
            if cv.class[i] == SKY {
                continue;
            }
            let r = cv.depth[i];
            let p_drop = (beta * r / cfg.d_max).min(1.0);
            if rng.random::<f64>() < p_drop {
                continue;
            }
            let z: f64 = StandardNormal.sample(&mut rng);
            let mut measured = r * (sigma * z).exp();
            if rng.random::<f64>() < outlier {
                let hi = r.min(10.0).max(cfg.d_min * 1.01);
                measured = rng.random_range(cfg.d_min..hi);
            }
            lidar_depth[i] = measured.clamp(cfg.d_min, cfg.d_max);
            lidar_valid[i] = true;
        }
    }
    let lidar_raw = SparseDepthMap {
        depth: Tensor::new(vec![h, w], lidar_depth)?,
        valid: lidar_valid,
    };

    // Radar: coarse returns from objects plus a little ground clutter.
    let mut radar = PointImage::empty(h, w);
    let p_return = match condition.weather {
        Weather::Clear | Weather::Fog => 0.9,
        Weather::Rain => 0.85,
        Weather::Snow => 0.8,
    };
    for &(class, id, d, px, py) in &boxes {
        let visible = cv
            .class
            .iter()
            .zip(&cv.inst)
            .any(|(&c, &i)| c == class && i == id);
        if !visible || !rng.random_bool(p_return) {
            continue;
        }
        let (x, y) = (
            px.clamp(0.0, w as f64 - 1.0) as usize,
            py.clamp(0.0, h as f64 - 1.0) as usize,
        );
        let rcs = match class {
            CAR => 1.0,
            PERSON => 0.4,
            _ => 0.6,
        };
        radar.set(y, x, [cfg.d_min / d, rcs, 1.0]);
    }
    for _ in 0..2 {
        if rng.random_bool(0.5) && horizon + 1 < h {
            let (y, x) = (rng.random_range(horizon + 1..h), rng.random_range(0..w));
            radar.set(y, x, [cfg.d_min / cv.depth[y * w + x], 0.15, 1.0]);
        }
    }

    let lidar_points = lidar_point_image(&lidar_raw, cfg.d_min, cfg.d_max);
    let mut rgb_planar = vec![0.0; 3 * n];
    for (i, px) in rgb.iter().enumerate() {
        for c in 0..3 {
            rgb_planar[c * n + i] = px[c];
        }
    }

    Ok(MultimodalSample {
        rgb: Tensor::new(vec![3, h, w], rgb_planar)?,
        lidar_input: project_and_dilate(&lidar_points, cfg.k_lidar)?,
        radar_input: project_and_dilate(&radar, cfg.k_radar)?,
        event_input: project_and_dilate(&events, cfg.k_event)?,
        lidar_raw,
        panoptic: PanopticMap {
            height: h,
            width: w,
            class_id: cv.class,
            instance_id: cv.inst,
        },
        condition,
        true_depth: Tensor::new(vec![h, w], cv.depth)?,
    })
}

/// Lidar returns as a point image: (normalised inverse depth, range
/// attenuated intensity, validity). Inverse depth makes max-dilation keep
/// the nearest return.
pub fn lidar_point_image(raw: &SparseDepthMap, d_min: f64, d_max: f64) -> PointImage {
    let (h, w) = (raw.depth.shape()[0], raw.depth.shape()[1]);
    let mut p = PointImage::empty(h, w);
    for (i, &valid) in raw.valid.iter().enumerate() {
        if valid {
            let d = raw.depth.data()[i];
            let atten = (1.0 - d / d_max).max(0.0);
            p.set(i / w, i % w, [d_min / d, atten * atten, 1.0]);
        }
    }
    p
}

/// Paint pixels whose centres fall inside `[x0, x1) x [y0, y1)`; `f` gets
/// pixel coordinates and the normalised position `(u, v)` inside the box.
fn fill_box(
    cv: &mut Canvas,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    mut f: impl FnMut(f64, f64, f64, f64) -> Option<(f64, u16, u16, [f64; 3])>,
) {
    let (bw, bh) = ((x1 - x0).max(1e-9), (y1 - y0).max(1e-9));
    let ys = (y0.floor().max(0.0) as usize)..(y1.ceil().min(cv.h as f64).max(0.0) as usize);
    let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().min(cv.w as f64).max(0.0) as usize);
    for y in ys {
        let cy = y as f64 + 0.5;
        if cy < y0 || cy >= y1 {
            continue;
        }
        for x in xs.clone() {
            let cxp = x as f64 + 0.5;
            if cxp < x0 || cxp >= x1 {
                continue;
            }
            let (u, v) = ((cxp - x0) / bw, (cy - y0) / bh);
            if let Some((d, class, inst, color)) = f(x as f64, y as f64, u, v) {
                cv.paint(y, x, d, class, inst, color);
            }
        }
    }
}

//! Procedural paired-domain street scenes with exact panoptic ground truth.
//!
//! Stuff categories occupy the low ids in paint order: background (0) fills the
//! canvas, then sky, vegetation and road are painted as horizontal bands. Thing
//! categories follow, each drawn with a fixed shape: car (square), person (bar),
//! sign (triangle), tree (circle), repeating for larger category counts.
//!
//! Domain A is a grayscale rendering with one intensity per category. Domain B gives
//! every instance a colour from its category palette chosen by the instance's style
//! seed. Both carry seeded noise of amplitude at most [`NOISE_AMPLITUDE`], then are
//! quantized to 8 bits so that PNG storage is lossless.

mod dataset;

pub use dataset::{dataset_hash, read_dataset, write_dataset, write_image_png};

use crate::config::Config;
use crate::rng::{mix, stream, Rng};
use crate::types::{byte_to_unit, unit_to_byte, ImageTensor, ObjectEntry, PanopticMap};

pub const NOISE_AMPLITUDE: f64 = 0.02;
/// Stuff categories with a band in the scene layout (background, sky, vegetation, road).
pub const RENDERED_STUFF: usize = 4;
pub const MAX_THINGS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Bar,
}

impl Shape {
    /// Shape used for a thing category, by its offset among thing categories.
    pub fn for_offset(offset: usize) -> Shape {
        [Shape::Square, Shape::Bar, Shape::Triangle, Shape::Circle][offset % 4]
    }

    /// Whether the pixel offset `(dx, dy)` from the centre lies inside a shape of side `size`.
    fn covers(self, dx: f64, dy: f64, size: f64) -> bool {
        let half = size / 2.0;
        match self {
            Shape::Square => dx.abs() < half && dy.abs() < half,
            Shape::Bar => dx.abs() < 0.2 * size && dy.abs() < half,
            Shape::Triangle => dy > -half && dy < half && dx.abs() < (dy + half) / 2.0,
            Shape::Circle => dx * dx + dy * dy < half * half,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThingSpec {
    pub shape: Shape,
    pub category_id: usize,
    /// Centre in pixel-corner coordinates.
    pub center: (usize, usize),
    pub size: usize,
    pub style_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub horizon: usize,
    pub vegetation_rows: usize,
    pub road_top: usize,
    pub road_bottom: usize,
    /// Style seed per rendered stuff category, indexed by category id.
    pub stuff_styles: Vec<u64>,
    /// Back to front.
    pub things: Vec<ThingSpec>,
    pub noise_seed: u64,
}

pub fn stuff_count(cfg: &Config) -> usize {
    cfg.stuff_categories.min(RENDERED_STUFF)
}

/// Draw a random scene. Thing count is uniform in `1..=4`, capped so that stuff plus
/// things never exceed `max_objects`.
pub fn sample_scene(rng: &mut Rng, cfg: &Config) -> SceneSpec {
    let n = cfg.image_size;
    let nf = n as f64;
    let frac = |rng: &mut Rng, lo: f64, hi: f64| (nf * (lo + (hi - lo) * rng.uniform())) as usize;
    let horizon = frac(rng, 0.25, 0.45).max(1);
    let vegetation_rows = frac(rng, 0.05, 0.12).max(1);
    let road_top = horizon + vegetation_rows + frac(rng, 0.06, 0.15).max(1);
    let margin = (n / 16).max(1);
    let road_bottom = (road_top + frac(rng, 0.12, 0.22).max(1)).min(n - margin);
    let stuff = stuff_count(cfg);
    let stuff_styles = (0..stuff).map(|_| rng.next_u64()).collect();

    let thing_categories = cfg.CAT - cfg.stuff_categories;
    let wanted = rng.range_inclusive(1, MAX_THINGS as i64) as usize;
    let count = wanted.min(cfg.max_objects.saturating_sub(stuff));
    let things = (0..count)
        .map(|_| {
            let offset = rng.below(thing_categories);
            let size = frac(rng, 0.15, 0.35).max(3);
            let half = size.div_ceil(2);
            let cx = rng.range_inclusive(half as i64, (n - half) as i64) as usize;
            let cy = rng.range_inclusive(half as i64, (n - half) as i64) as usize;
            ThingSpec {
                shape: Shape::for_offset(offset),
                category_id: cfg.stuff_categories + offset,
                center: (cx, cy),
                size,
                style_seed: rng.next_u64(),
            }
        })
        .collect();
    SceneSpec {
        horizon,
        vegetation_rows,
        road_top,
        road_bottom,
        stuff_styles,
        things,
        noise_seed: rng.next_u64(),
    }
}

/// Scene for sample `index` of a dataset generated with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    mix(seed, index as u64)
}

pub fn scene_for(scene_seed: u64, cfg: &Config) -> SceneSpec {
    sample_scene(&mut Rng::new(scene_seed, stream::SCENE), cfg)
}

/// One painted element: stuff band or thing, in paint order.
#[derive(Clone, Copy, Debug)]
struct Element {
    category_id: usize,
    is_thing: bool,
    style_seed: u64,
}

/// Per-pixel element index after painting back to front.
fn paint(scene: &SceneSpec, cfg: &Config) -> (Vec<usize>, Vec<Element>) {
    let n = cfg.image_size;
    let stuff = scene.stuff_styles.len();
    let mut elements: Vec<Element> = (0..stuff)
        .map(|c| Element {
            category_id: c,
            is_thing: false,
            style_seed: scene.stuff_styles[c],
        })
        .collect();
    let mut labels = vec![0usize; n * n];
    let bands = [
        (0, scene.horizon),
        (scene.horizon, scene.horizon + scene.vegetation_rows),
        (scene.road_top, scene.road_bottom),
    ];
    for (k, &(y0, y1)) in bands.iter().enumerate().take(stuff.saturating_sub(1)) {
        for y in y0..y1.min(n) {
            labels[y * n..(y + 1) * n].fill(k + 1);
        }
    }
    for t in &scene.things {
        let idx = elements.len();
        elements.push(Element {
            category_id: t.category_id,
            is_thing: true,
            style_seed: t.style_seed,
        });
        let (cx, cy) = (t.center.0 as f64, t.center.1 as f64);
        for y in 0..n {
            for x in 0..n {
                if t.shape.covers(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, t.size as f64) {
                    labels[y * n + x] = idx;
                }
            }
        }
    }
    (labels, elements)
}

/// Ground-truth panoptic map: stuff in paint order, then surviving things front-most
/// last. Fully occluded elements are dropped.
pub fn derive_panoptic(scene: &SceneSpec, cfg: &Config) -> PanopticMap {
    let n = cfg.image_size;
    let (labels, elements) = paint(scene, cfg);
    let objects = elements
        .iter()
        .enumerate()
        .filter_map(|(i, e)| {
            let mask: Vec<bool> = labels.iter().map(|&l| l == i).collect();
            ObjectEntry::from_mask(e.category_id, mask, n, e.is_thing)
        })
        .collect();
    PanopticMap::new(n, objects).cap_objects(cfg.max_objects)
}

/// Render both domains.
pub fn render_pair(scene: &SceneSpec, cfg: &Config) -> (ImageTensor, ImageTensor) {
    let n = cfg.image_size;
    let (labels, elements) = paint(scene, cfg);
    let grays: Vec<f64> = elements.iter().map(|e| gray_level(e.category_id, cfg)).collect();
    let colors: Vec<[u8; 3]> = elements
        .iter()
        .map(|e| {
            let pal = palette(e.category_id, cfg);
            pal[(e.style_seed % pal.len() as u64) as usize]
        })
        .collect();
    let mut noise = Rng::new(scene.noise_seed, stream::NOISE);
    let mut a = vec![0f32; n * n * 3];
    let mut b = vec![0f32; n * n * 3];
    for p in 0..n * n {
        let v = grays[labels[p]] + NOISE_AMPLITUDE * (2.0 * noise.uniform() - 1.0);
        let q = byte_to_unit(unit_to_byte(v as f32));
        a[p * 3..p * 3 + 3].fill(q);
    }
    for p in 0..n * n {
        let col = colors[labels[p]];
        for c in 0..3 {
            let v = byte_to_unit(col[c]) as f64 + NOISE_AMPLITUDE * (2.0 * noise.uniform() - 1.0);
            b[p * 3 + c] = byte_to_unit(unit_to_byte(v as f32));
        }
    }
    (
        ImageTensor::new(n, n, a).expect("rendered values are in range"),
        ImageTensor::new(n, n, b).expect("rendered values are in range"),
    )
}

const STUFF_GRAY: [f64; RENDERED_STUFF] = [-0.25, -0.75, -0.5, 0.0];
const THING_GRAY: [f64; 4] = [0.5, 0.9, 0.25, 0.7];

const STUFF_PALETTES: [&[[u8; 3]]; RENDERED_STUFF] = [
    &[[120, 110, 95], [126, 114, 98], [114, 106, 92]],
    &[[110, 150, 200], [118, 156, 204], [104, 144, 194]],
    &[[70, 120, 60], [76, 126, 64], [64, 114, 56]],
    &[[90, 90, 95], [96, 96, 100], [84, 84, 90]],
];

const THING_PALETTES: [&[[u8; 3]]; 4] = [
    &[[200, 30, 30], [30, 60, 200], [230, 210, 40], [240, 240, 240]],
    &[[240, 130, 20], [140, 40, 170], [20, 190, 190]],
    &[[250, 100, 180], [130, 230, 40], [150, 80, 20]],
    &[[15, 15, 15], [0, 150, 70], [130, 150, 0]],
];

fn procedural(category_id: usize, salt: u64) -> u64 {
    mix(0x5eed_ca7e ^ salt, category_id as u64)
}

/// Domain-A intensity in `[-1, 1]` for a category.
pub fn gray_level(category_id: usize, cfg: &Config) -> f64 {
    let offset = category_id.checked_sub(cfg.stuff_categories);
    match offset {
        None if category_id < RENDERED_STUFF => STUFF_GRAY[category_id],
        Some(o) if o < 4 => THING_GRAY[o],
        _ => (procedural(category_id, 1) % 1000) as f64 / 1000.0 * 1.8 - 0.9,
    }
}

/// Domain-B palette for a category (at least three colours).
pub fn palette(category_id: usize, cfg: &Config) -> Vec<[u8; 3]> {
    let offset = category_id.checked_sub(cfg.stuff_categories);
    match offset {
        None if category_id < RENDERED_STUFF => STUFF_PALETTES[category_id].to_vec(),
        Some(o) if o < 4 => THING_PALETTES[o].to_vec(),
        _ => (0..3)
            .map(|k| {
                let h = procedural(category_id, 2 + k);
                [h as u8, (h >> 8) as u8, (h >> 16) as u8]
            })
            .collect(),
    }
}

/// One generated or loaded dataset element.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub scene_seed: u64,
    /// Domain A (grayscale, the "thermal" side).
    pub a: ImageTensor,
    /// Domain B (colour).
    pub b: ImageTensor,
    pub panoptic: PanopticMap,
}

pub fn generate_sample(cfg: &Config, seed: u64, index: usize) -> Sample {
    let s = scene_seed(seed, index);
    let scene = scene_for(s, cfg);
    let (a, b) = render_pair(&scene, cfg);
    Sample {
        index,
        scene_seed: s,
        a,
        b,
        panoptic: derive_panoptic(&scene, cfg),
    }
}

pub fn generate_dataset(cfg: &Config, n: usize, seed: u64) -> Vec<Sample> {
    (0..n).map(|i| generate_sample(cfg, seed, i)).collect()
}

/// Assign every pixel of a domain-B image to the category whose palette holds the
/// nearest colour, then split thing categories into 4-connected components. Stuff
/// categories become one segment each. The result is a valid tiling map used as the
/// "predicted" panoptic map for translated images.
pub fn palette_segment(img: &ImageTensor, cfg: &Config) -> PanopticMap {
    let n = img.height();
    let mut table = Vec::new();
    for c in 0..cfg.CAT {
        if c < cfg.stuff_categories && c >= RENDERED_STUFF {
            continue;
        }
        for col in palette(c, cfg) {
            table.push((c, col.map(|v| byte_to_unit(v))));
        }
    }
    let cats: Vec<usize> = (0..n * n)
        .map(|p| {
            let px = img.pixel(p / n, p % n);
            table
                .iter()
                .map(|(c, col)| {
                    let d: f32 = (0..3).map(|k| (px[k] - col[k]).powi(2)).sum();
                    (*c, d)
                })
                .fold((0, f32::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                .0
        })
        .collect();
    let mut segment = vec![usize::MAX; n * n];
    let mut attrs: Vec<(usize, bool)> = Vec::new();
    let mut stuff_segment = vec![usize::MAX; cfg.CAT];
    for start in 0..n * n {
        if segment[start] != usize::MAX {
            continue;
        }
        let cat = cats[start];
        let is_thing = cat >= cfg.stuff_categories;
        if !is_thing {
            if stuff_segment[cat] == usize::MAX {
                stuff_segment[cat] = attrs.len();
                attrs.push((cat, false));
            }
            segment[start] = stuff_segment[cat];
            continue;
        }
        let id = attrs.len();
        attrs.push((cat, true));
        let mut stack = vec![start];
        segment[start] = id;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / n, p % n);
            let mut visit = |q: usize| {
                if segment[q] == usize::MAX && cats[q] == cat {
                    segment[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < n {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - n);
            }
            if y + 1 < n {
                visit(p + n);
            }
        }
    }
    PanopticMap::from_labels(n, &segment, &attrs).expect("every segment has at least its seed pixel")
}

/// Visualization: the image blended half-way with one colour per panoptic segment,
/// segment boundaries drawn white.
pub fn panoptic_overlay(img: &ImageTensor, map: &PanopticMap) -> ImageTensor {
    let n = map.size;
    let labels = map.label_map();
    let mut out = img.clone();
    for y in 0..n {
        for x in 0..n {
            let Some(l) = labels[y * n + x] else { continue };
            let edge = [(0isize, 1isize), (1, 0), (0, -1), (-1, 0)].iter().any(|&(dy, dx)| {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                yy >= 0 && xx >= 0 && (yy as usize) < n && (xx as usize) < n && labels[yy as usize * n + xx as usize] != Some(l)
            });
            let px = if edge {
                [1.0; 3]
            } else {
                let h = mix(0x6f76_6572, l as u64);
                let tint = [h as u8, (h >> 8) as u8, (h >> 16) as u8].map(byte_to_unit);
                let p = img.pixel(y, x);
                [0, 1, 2].map(|c| 0.5 * p[c] + 0.5 * tint[c])
            };
            out.set_pixel(y, x, px);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_panoptic_map;

    fn cfg() -> Config {
        Config::desk()
    }

    #[test]
    fn scenes_are_deterministic_and_seed_dependent() {
        let c = cfg();
        assert_eq!(scene_for(0, &c), scene_for(0, &c));
        assert_ne!(scene_for(0, &c), scene_for(1, &c));
    }

    #[test]
    fn thousand_scenes_satisfy_invariants() {
        let c = cfg();
        let mut counts = [0usize; MAX_THINGS + 1];
        for i in 0..1000 {
            let s = scene_for(scene_seed(3, i), &c);
            assert!((1..=MAX_THINGS).contains(&s.things.len()));
            assert!(s.things.len() + stuff_count(&c) <= c.max_objects);
            counts[s.things.len()] += 1;
            for t in &s.things {
                let half = t.size.div_ceil(2);
                assert!(t.center.0 >= half && t.center.0 + half <= c.image_size);
                assert!(t.center.1 >= half && t.center.1 + half <= c.image_size);
                assert!(t.category_id >= c.stuff_categories && t.category_id < c.CAT);
            }
            let map = derive_panoptic(&s, &c);
            let v = validate_panoptic_map(&map, &c);
            assert!(v.is_empty(), "scene {i}: {v:?}");
        }
        // roughly uniform thing counts
        for &k in &counts[1..] {
            assert!((180..320).contains(&k), "{counts:?}");
        }
    }

    #[test]
    fn domain_a_is_grayscale() {
        let c = cfg();
        let (a, _) = render_pair(&scene_for(11, &c), &c);
        for p in a.data().chunks(3) {
            assert!(p[0] == p[1] && p[1] == p[2]);
        }
    }

    #[test]
    fn changing_one_car_style_only_changes_its_pixels() {
        let c = cfg();
        // find a scene with a car
        let (mut scene, car) = (0..)
            .find_map(|seed| {
                let s = scene_for(seed, &c);
                let idx = s.things.iter().position(|t| t.shape == Shape::Square)?;
                Some((s, idx))
            })
            .unwrap();
        let (_, before) = render_pair(&scene, &c);
        scene.things[car].style_seed += 1; // next palette entry
        let (_, after) = render_pair(&scene, &c);
        let map = derive_panoptic(&scene, &c);
        let labels = map.label_map();
        let mut owners = std::collections::BTreeSet::new();
        let mut changed = 0;
        for p in 0..c.image_size * c.image_size {
            if before.data()[p * 3..p * 3 + 3] != after.data()[p * 3..p * 3 + 3] {
                changed += 1;
                owners.insert(labels[p].unwrap());
            }
        }
        assert_eq!(owners.len(), 1);
        let owner = &map.objects[*owners.first().unwrap()];
        assert!(owner.is_thing && owner.category_id == scene.things[car].category_id);
        assert!(changed > 0);
    }

    #[test]
    fn background_only_scene_is_constant_palette_colour() {
        let c = Config {
            stuff_categories: 1,
            ..cfg()
        };
        let scene = SceneSpec {
            horizon: 10,
            vegetation_rows: 3,
            road_top: 20,
            road_bottom: 30,
            stuff_styles: vec![7],
            things: vec![],
            noise_seed: 1,
        };
        let (_, b) = render_pair(&scene, &c);
        let col = palette(0, &c)[7 % 3].map(byte_to_unit);
        let tol = NOISE_AMPLITUDE as f32 + 1.0 / 255.0;
        for p in b.data().chunks(3) {
            for k in 0..3 {
                assert!((p[k] - col[k]).abs() <= tol);
            }
        }
        let map = derive_panoptic(&scene, &c);
        assert_eq!(map.len(), 1);
    }

    #[test]
    fn geometry_ignores_style_seeds() {
        let c = cfg();
        let mut s = scene_for(5, &c);
        let before = derive_panoptic(&s, &c);
        for t in &mut s.things {
            t.style_seed = t.style_seed.wrapping_mul(31).wrapping_add(7);
        }
        s.stuff_styles.iter_mut().for_each(|v| *v ^= 0xff);
        assert_eq!(derive_panoptic(&s, &c), before);
    }

    #[test]
    fn overlapping_squares_notch_the_back_one() {
        let c = cfg();
        let square = |cx, cy, seed| ThingSpec {
            shape: Shape::Square,
            category_id: c.stuff_categories,
            center: (cx, cy),
            size: 16,
            style_seed: seed,
        };
        let scene = SceneSpec {
            horizon: 16,
            vegetation_rows: 4,
            road_top: 28,
            road_bottom: 40,
            stuff_styles: vec![0; 4],
            things: vec![square(24, 24, 0), square(32, 32, 1)],
            noise_seed: 0,
        };
        let map = derive_panoptic(&scene, &c);
        assert!(validate_panoptic_map(&map, &c).is_empty());
        let cars: Vec<_> = map.objects.iter().filter(|o| o.is_thing).collect();
        assert_eq!(cars.len(), 2);
        let (back, front) = (cars[0], cars[1]);
        assert_eq!(front.area(), 256);
        assert_eq!(back.area(), 256 - 64);
        // the missing quadrant is the one under the front square
        let n = c.image_size;
        for y in 24..32 {
            for x in 24..32 {
                assert!(!back.mask[y * n + x] && front.mask[y * n + x]);
            }
        }
        assert_eq!(back.bbox.as_array(), [16, 16, 32, 32]);
    }

    #[test]
    fn zero_thing_scene_is_all_stuff() {
        let c = cfg();
        let mut s = scene_for(2, &c);
        s.things.clear();
        let m = derive_panoptic(&s, &c);
        assert_eq!(m.len(), stuff_count(&c));
        assert!(validate_panoptic_map(&m, &c).is_empty());
    }

    #[test]
    fn fully_occluded_thing_is_dropped() {
        let c = cfg();
        let mut s = scene_for(2, &c);
        let t = ThingSpec {
            shape: Shape::Square,
            category_id: c.stuff_categories,
            center: (32, 32),
            size: 6,
            style_seed: 0,
        };
        let big = ThingSpec {
            size: 20,
            ..t.clone()
        };
        s.things = vec![t, big];
        let m = derive_panoptic(&s, &c);
        assert_eq!(m.objects.iter().filter(|o| o.is_thing).count(), 1);
    }

    #[test]
    fn every_thing_category_shows_three_colours() {
        let c = cfg();
        let mut seen = vec![std::collections::BTreeSet::new(); c.CAT];
        for i in 0..300 {
            let s = scene_for(scene_seed(0, i), &c);
            for t in &s.things {
                let pal = palette(t.category_id, &c);
                seen[t.category_id].insert((t.style_seed % pal.len() as u64) as usize);
            }
        }
        for cat in c.stuff_categories..c.CAT {
            assert!(seen[cat].len() >= 3, "category {cat}: {:?}", seen[cat]);
        }
    }

    #[test]
    fn palette_segmenter_recovers_ground_truth_on_real_images() {
        let c = cfg();
        let mut exact = 0;
        for i in 0..20 {
            let s = generate_sample(&c, 0, i);
            let pred = palette_segment(&s.b, &c);
            assert!(validate_panoptic_map(&pred, &Config { max_objects: 1000, ..c.clone() }).is_empty());
            let gt_labels: Vec<usize> = s.panoptic.label_map().iter().map(|l| s.panoptic.objects[l.unwrap()].category_id).collect();
            let pred_labels: Vec<usize> = pred.label_map().iter().map(|l| pred.objects[l.unwrap()].category_id).collect();
            if gt_labels == pred_labels {
                exact += 1;
            }
        }
        assert_eq!(exact, 20);
    }
}

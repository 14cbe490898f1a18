//! Point sampling on triangle meshes for initializing Gaussian clouds.

use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{add, cross, dot, norm, scale, sub, Vec3};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("every object has zero volume")]
    ZeroVolumeAll,
    #[error("object {object}: triangle {triangle} references a missing vertex")]
    InvalidIndex { object: usize, triangle: usize },
    #[error("obj line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid sampling config: {0}")]
    InvalidConfig(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

type P = Vec3<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshObject {
    pub name: String,
    pub vertices: Vec<P>,
    pub triangles: Vec<[usize; 3]>,
}

impl MeshObject {
    pub fn triangle(&self, i: usize) -> [P; 3] {
        let [a, b, c] = self.triangles[i];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_areas(&self) -> Vec<f64> {
        (0..self.triangles.len()).map(|i| triangle_area(self.triangle(i))).collect()
    }

    pub fn area(&self) -> f64 {
        self.triangle_areas().iter().sum()
    }

    /// `|Σ A·(B×C)| / 6`; exact for closed, consistently oriented meshes.
    pub fn volume(&self) -> f64 {
        let s: f64 = (0..self.triangles.len())
            .map(|i| {
                let [a, b, c] = self.triangle(i);
                dot(a, cross(b, c))
            })
            .sum();
        s.abs() / 6.0
    }
}

pub fn triangle_area(t: [P; 3]) -> f64 {
    0.5 * norm(cross(sub(t[1], t[0]), sub(t[2], t[0])))
}

pub fn mesh_area(o: &MeshObject) -> f64 {
    o.area()
}

pub fn mesh_volume(o: &MeshObject) -> f64 {
    o.volume()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeshScene {
    pub objects: Vec<MeshObject>,
}

impl MeshScene {
    pub fn validate(&self) -> Result<(), MeshError> {
        for (oi, o) in self.objects.iter().enumerate() {
            for (ti, t) in o.triangles.iter().enumerate() {
                if t.iter().any(|&v| v >= o.vertices.len()) {
                    return Err(MeshError::InvalidIndex { object: oi, triangle: ti });
                }
            }
        }
        if self.num_triangles() == 0 {
            return Err(MeshError::EmptyMesh);
        }
        Ok(())
    }

    pub fn num_triangles(&self) -> usize {
        self.objects.iter().map(|o| o.triangles.len()).sum()
    }

    pub fn aabb(&self) -> Aabb {
        let mut b = Aabb::empty();
        for o in &self.objects {
            for t in &o.triangles {
                for &v in t {
                    b.include(o.vertices[v]);
                }
            }
        }
        b
    }

    pub fn load_obj(path: impl AsRef<Path>) -> Result<Self, MeshError> {
        Self::parse_obj(&std::fs::read_to_string(path)?)
    }

    /// OBJ subset: `v`, `f` (polygons fan-triangulated, `v/vt/vn` and negative
    /// indices accepted) and `o`/`g` object boundaries. Other lines are ignored.
    pub fn parse_obj(text: &str) -> Result<Self, MeshError> {
        let mut positions: Vec<P> = Vec::new();
        let mut objects: Vec<(String, Vec<[usize; 3]>)> = vec![("default".into(), Vec::new())];
        for (ln, raw) in text.lines().enumerate() {
            let line = ln + 1;
            let err = |m: &str| MeshError::Parse {
                line,
                message: m.to_string(),
            };
            let mut it = raw.split_whitespace();
            match it.next() {
                Some("v") => {
                    let xs: Vec<f64> = it
                        .take(3)
                        .map(|s| s.parse().map_err(|_| err("bad vertex coordinate")))
                        .collect::<Result<_, _>>()?;
                    if xs.len() != 3 {
                        return Err(err("vertex needs three coordinates"));
                    }
                    positions.push([xs[0], xs[1], xs[2]]);
                }
                Some("f") => {
                    let idx: Vec<usize> = it
                        .map(|s| {
                            let head = s.split('/').next().unwrap_or("");
                            let i: i64 = head.parse().map_err(|_| err("bad face index"))?;
                            let n = positions.len() as i64;
                            let k = if i > 0 { i - 1 } else { n + i };
                            if i == 0 || k < 0 || k >= n {
                                return Err(err("face index out of range"));
                            }
                            Ok(k as usize)
                        })
                        .collect::<Result<_, _>>()?;
                    if idx.len() < 3 {
                        return Err(err("face needs at least three vertices"));
                    }
                    let tris = &mut objects.last_mut().expect("non-empty").1;
                    for k in 1..idx.len() - 1 {
                        tris.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                Some("o") | Some("g") => {
                    let name = it.collect::<Vec<_>>().join(" ");
                    let last = objects.last_mut().expect("non-empty");
                    if last.1.is_empty() {
                        last.0 = name;
                    } else {
                        objects.push((name, Vec::new()));
                    }
                }
                _ => {}
            }
        }
        let objects = objects
            .into_iter()
            .filter(|(_, t)| !t.is_empty())
            .map(|(name, tris)| {
                let mut remap = std::collections::HashMap::new();
                let mut vertices = Vec::new();
                let triangles = tris
                    .iter()
                    .map(|t| {
                        t.map(|g| {
                            *remap.entry(g).or_insert_with(|| {
                                vertices.push(positions[g]);
                                vertices.len() - 1
                            })
                        })
                    })
                    .collect();
                MeshObject {
                    name,
                    vertices,
                    triangles,
                }
            })
            .collect();
        Ok(Self { objects })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: P,
    pub max: P,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: [f64::INFINITY; 3],
            max: [f64::NEG_INFINITY; 3],
        }
    }

    pub fn include(&mut self, p: P) {
        for k in 0..3 {
            self.min[k] = self.min[k].min(p[k]);
            self.max[k] = self.max[k].max(p[k]);
        }
    }

    pub fn merge(&self, o: &Aabb) -> Aabb {
        let mut b = *self;
        b.include(o.min);
        b.include(o.max);
        b
    }

    pub fn distance_sq(&self, p: P) -> f64 {
        (0..3)
            .map(|k| {
                let d = (self.min[k] - p[k]).max(0.0).max(p[k] - self.max[k]);
                d * d
            })
            .sum()
    }
}

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision
/// Detection, 5.1.5).
pub fn closest_point_on_triangle(p: P, a: P, b: P, c: P) -> P {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return add(a, scale(ab, v));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return add(a, scale(ac, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return add(b, scale(sub(c, b), w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    add(a, add(scale(ab, v), scale(ac, w)))
}

pub fn point_triangle_distance(p: P, t: [P; 3]) -> f64 {
    norm(sub(p, closest_point_on_triangle(p, t[0], t[1], t[2])))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NearestHit {
    pub object: usize,
    pub triangle: usize,
    pub distance: f64,
}

fn better(d: f64, o: usize, t: usize, best: &Option<NearestHit>) -> bool {
    match best {
        None => true,
        Some(b) => d < b.distance || (d == b.distance && (o, t) < (b.object, b.triangle)),
    }
}

/// Exhaustive scan over all triangles.
pub fn nearest_triangle_brute(p: P, scene: &MeshScene) -> Result<NearestHit, MeshError> {
    let mut best = None;
    for (oi, o) in scene.objects.iter().enumerate() {
        for ti in 0..o.triangles.len() {
            let d = point_triangle_distance(p, o.triangle(ti));
            if better(d, oi, ti, &best) {
                best = Some(NearestHit {
                    object: oi,
                    triangle: ti,
                    distance: d,
                });
            }
        }
    }
    best.ok_or(MeshError::EmptyMesh)
}

enum Node {
    Leaf { bounds: Aabb, items: Vec<usize> },
    Inner { bounds: Aabb, left: Box<Node>, right: Box<Node> },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Bounding-volume hierarchy over every triangle of a scene.
pub struct TriangleTree<'a> {
    scene: &'a MeshScene,
    refs: Vec<(usize, usize)>,
    tris: Vec<[P; 3]>,
    root: Node,
}

const LEAF_SIZE: usize = 4;

impl<'a> TriangleTree<'a> {
    pub fn build(scene: &'a MeshScene) -> Result<Self, MeshError> {
        scene.validate()?;
        let mut refs = Vec::new();
        let mut tris = Vec::new();
        for (oi, o) in scene.objects.iter().enumerate() {
            for ti in 0..o.triangles.len() {
                refs.push((oi, ti));
                tris.push(o.triangle(ti));
            }
        }
        let items: Vec<usize> = (0..tris.len()).collect();
        let root = Self::build_node(&tris, items);
        Ok(Self {
            scene,
            refs,
            tris,
            root,
        })
    }

    fn tri_bounds(t: &[P; 3]) -> Aabb {
        let mut b = Aabb::empty();
        t.iter().for_each(|&v| b.include(v));
        b
    }

    fn build_node(tris: &[[P; 3]], mut items: Vec<usize>) -> Node {
        let bounds = items
            .iter()
            .fold(Aabb::empty(), |b, &i| b.merge(&Self::tri_bounds(&tris[i])));
        if items.len() <= LEAF_SIZE {
            return Node::Leaf { bounds, items };
        }
        let centroid = |i: usize| scale(add(add(tris[i][0], tris[i][1]), tris[i][2]), 1.0 / 3.0);
        let ext = sub(bounds.max, bounds.min);
        let axis = (0..3).max_by(|&a, &b| ext[a].total_cmp(&ext[b])).unwrap_or(0);
        items.sort_by(|&a, &b| centroid(a)[axis].total_cmp(&centroid(b)[axis]).then(a.cmp(&b)));
        let right = items.split_off(items.len() / 2);
        Node::Inner {
            bounds,
            left: Box::new(Self::build_node(tris, items)),
            right: Box::new(Self::build_node(tris, right)),
        }
    }

    pub fn scene(&self) -> &MeshScene {
        self.scene
    }

    pub fn nearest(&self, p: P) -> NearestHit {
        let mut best: Option<NearestHit> = None;
        let mut stack = vec![&self.root];
        while let Some(node) = stack.pop() {
            if let Some(b) = &best {
                // Equal distance may still win the index tie-break.
                if node.bounds().distance_sq(p).sqrt() > b.distance {
                    continue;
                }
            }
            match node {
                Node::Leaf { items, .. } => {
                    for &i in items {
                        let (oi, ti) = self.refs[i];
                        let d = point_triangle_distance(p, self.tris[i]);
                        if better(d, oi, ti, &best) {
                            best = Some(NearestHit {
                                object: oi,
                                triangle: ti,
                                distance: d,
                            });
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let (dl, dr) = (left.bounds().distance_sq(p), right.bounds().distance_sq(p));
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        best.expect("tree is non-empty")
    }
}

pub fn nearest_triangle(p: P, scene: &MeshScene) -> Result<NearestHit, MeshError> {
    Ok(TriangleTree::build(scene)?.nearest(p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStrategy {
    SurfaceArea,
    UniformTriangle,
    Bbox,
}

impl FromStr for SampleStrategy {
    type Err = MeshError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "surface_area" => Ok(Self::SurfaceArea),
            "uniform_triangle" => Ok(Self::UniformTriangle),
            "bbox" => Ok(Self::Bbox),
            other => Err(MeshError::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Point counts for the three initialization presets.
pub const OBJECT_POINTS: usize = 10_000;
pub const OBJECT_SCENE_POINTS: usize = 5_000;
pub const SCENE_POINTS: usize = 50_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub strategy: SampleStrategy,
    pub count: usize,
    pub rng_seed: u64,
}

/// `(1−u)A + u(1−r2)B + u·r2·C` with `u = √r1`.
pub fn sample_in_triangle(t: [P; 3], r1: f64, r2: f64) -> P {
    let u = r1.sqrt();
    add(add(scale(t[0], 1.0 - u), scale(t[1], u * (1.0 - r2))), scale(t[2], u * r2))
}

/// One sampled point together with the triangle it was drawn on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledPoint {
    pub point: P,
    pub object: usize,
    pub triangle: usize,
}

const CHUNK: usize = 4096;

/// Samples with provenance; chunks use independent streams of the seed and
/// are concatenated in order, so output is independent of thread count.
pub fn sample_points_detailed(scene: &MeshScene, cfg: &SampleConfig) -> Result<Vec<SampledPoint>, MeshError> {
    if cfg.count == 0 {
        return Err(MeshError::InvalidConfig("count must be positive".into()));
    }
    scene.validate()?;
    let areas: Vec<Vec<f64>> = scene.objects.iter().map(|o| o.triangle_areas()).collect();
    let tri_pickers: Vec<Option<WeightedIndex<f64>>> =
        areas.iter().map(|a| WeightedIndex::new(a.iter().copied()).ok()).collect();
    let with_tris: Vec<usize> = (0..scene.objects.len())
        .filter(|&i| !scene.objects[i].triangles.is_empty())
        .collect();

    let object_picker = match cfg.strategy {
        SampleStrategy::SurfaceArea => {
            let w: Vec<f64> = scene
                .objects
                .iter()
                .enumerate()
                .map(|(i, o)| if tri_pickers[i].is_some() { o.volume().powf(2.0 / 3.0) } else { 0.0 })
                .collect();
            Some(WeightedIndex::new(w).map_err(|_| MeshError::ZeroVolumeAll)?)
        }
        _ => None,
    };
    let tree = match cfg.strategy {
        SampleStrategy::Bbox => Some(TriangleTree::build(scene)?),
        _ => None,
    };
    let bounds = scene.aabb();

    let n_chunks = cfg.count.div_ceil(CHUNK);
    let chunks: Vec<Vec<SampledPoint>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(ci as u64);
            let n = CHUNK.min(cfg.count - ci * CHUNK);
            (0..n)
                .map(|_| {
                    let (object, triangle) = match cfg.strategy {
                        SampleStrategy::SurfaceArea => {
                            let o = object_picker.as_ref().expect("built").sample(&mut rng);
                            (o, tri_pickers[o].as_ref().expect("positive weight").sample(&mut rng))
                        }
                        SampleStrategy::UniformTriangle => {
                            let o = with_tris[rng.random_range(0..with_tris.len())];
                            (o, rng.random_range(0..scene.objects[o].triangles.len()))
                        }
                        SampleStrategy::Bbox => {
                            let q: P = std::array::from_fn(|k| {
                                let (lo, hi) = (bounds.min[k], bounds.max[k]);
                                lo + (hi - lo) * rng.random::<f64>()
                            });
                            let hit = tree.as_ref().expect("built").nearest(q);
                            (hit.object, hit.triangle)
                        }
                    };
                    let (r1, r2) = (rng.random::<f64>(), rng.random::<f64>());
                    SampledPoint {
                        point: sample_in_triangle(scene.objects[object].triangle(triangle), r1, r2),
                        object,
                        triangle,
                    }
                })
                .collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

pub fn sample_points(scene: &MeshScene, cfg: &SampleConfig) -> Result<Vec<P>, MeshError> {
    Ok(sample_points_detailed(scene, cfg)?.into_iter().map(|s| s.point).collect())
}

/// One `x y z` line per point.
pub fn write_xyz(points: &[P], path: impl AsRef<Path>) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in points {
        writeln!(f, "{} {} {}", p[0], p[1], p[2])?;
    }
    f.flush()
}

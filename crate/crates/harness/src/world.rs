//! Analytic synthetic worlds.
//!
//! A world is a set of labelled surface primitives: axis-aligned boxes
//! (degenerate boxes double as rectangles, so floors and walls need no
//! extra machinery) and vertical cylinders for poles. The same primitives
//! serve two purposes, which keeps map and sensor geometry consistent by
//! construction:
//!
//! * [`build_world`] samples every surface at an area-proportional density
//!   into a labelled reference-map cloud;
//! * [`raycast`] intersects camera rays with the same surfaces to render
//!   depth frames.
//!
//! Transient primitives (parked vehicles and the like) are rendered and
//! flagged in the transient mask but never sampled into the map.

use nalgebra::Vector3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;
use vmrnav_core::cloud::{Frame, PointCloud};

/// Surface label attached to sampled map points.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceClass {
    Floor,
    Ceiling,
    Wall,
    Pillar,
    Facade,
    Pole,
    Vehicle,
}

/// Geometric shape of a primitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned box. A zero extent along one axis collapses it to a
    /// rectangle (floors, ceilings, walls).
    Cuboid { min: [f64; 3], max: [f64; 3] },
    /// Vertical cylinder: lateral surface plus the top disc.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z_min: f64,
        z_max: f64,
    },
}

/// One labelled surface primitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub class: SurfaceClass,
    pub shape: Shape,
    /// Transient objects appear in depth frames and the transient mask but
    /// are excluded from the reference map.
    #[serde(default)]
    pub transient: bool,
}

/// A synthetic world: primitives plus map-sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub name: String,
    /// Enclosed worlds use the indoor map layout (ground/surround split);
    /// open worlds use the tiled outdoor store.
    pub indoor: bool,
    /// Map sampling density, points per square metre.
    #[serde(default = "default_density")]
    pub density: f64,
    pub primitives: Vec<Primitive>,
}

fn default_density() -> f64 {
    100.0
}

/// Errors raised while loading or validating a world.
#[derive(Debug, Error)]
pub enum WorldError {
    #[error("failed to read world file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse world file {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("unknown world preset '{0}' (expected 'garage' or 'street', or a JSON file path)")]
    UnknownPreset(String),
    #[error("world '{0}' has no permanent primitives")]
    Empty(String),
}

impl WorldSpec {
    /// Built-in preset by name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "garage" => Some(Self::garage()),
            "street" => Some(Self::street()),
            _ => None,
        }
    }

    /// Resolves a `--world` argument: a preset name or a JSON file path.
    pub fn resolve(arg: &str) -> Result<Self, WorldError> {
        if let Some(spec) = Self::preset(arg) {
            return Ok(spec);
        }
        let path = Path::new(arg);
        if path.is_file() {
            return Self::load(path);
        }
        Err(WorldError::UnknownPreset(arg.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let text = std::fs::read_to_string(path).map_err(|source| WorldError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| WorldError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    /// Underground-garage preset: a 30 m x 20 m floor and ceiling, four
    /// perimeter walls 2.8 m high, and eight square pillars.
    pub fn garage() -> Self {
        let mut primitives = vec![
            rect(SurfaceClass::Floor, [-15.0, -10.0, 0.0], [15.0, 10.0, 0.0]),
            rect(SurfaceClass::Ceiling, [-15.0, -10.0, 2.8], [15.0, 10.0, 2.8]),
            rect(SurfaceClass::Wall, [-15.0, -10.0, 0.0], [15.0, -10.0, 2.8]),
            rect(SurfaceClass::Wall, [-15.0, 10.0, 0.0], [15.0, 10.0, 2.8]),
            rect(SurfaceClass::Wall, [-15.0, -10.0, 0.0], [-15.0, 10.0, 2.8]),
            rect(SurfaceClass::Wall, [15.0, -10.0, 0.0], [15.0, 10.0, 2.8]),
        ];
        for &px in &[-9.0, -3.0, 3.0, 9.0] {
            for &py in &[-4.5f64, 4.5] {
                primitives.push(Primitive {
                    class: SurfaceClass::Pillar,
                    shape: Shape::Cuboid {
                        min: [px - 0.2, py - 0.2, 0.0],
                        max: [px + 0.2, py + 0.2, 2.8],
                    },
                    transient: false,
                });
            }
        }
        Self {
            name: "garage".into(),
            indoor: true,
            density: default_density(),
            primitives,
        }
    }

    /// Urban-street preset: a 120 m ground strip, building facades on both
    /// sides, and two rows of poles.
    pub fn street() -> Self {
        let mut primitives = vec![
            rect(SurfaceClass::Floor, [0.0, -12.0, 0.0], [120.0, 12.0, 0.0]),
            rect(SurfaceClass::Facade, [0.0, -12.0, 0.0], [120.0, -12.0, 8.0]),
            rect(SurfaceClass::Facade, [0.0, 12.0, 0.0], [120.0, 12.0, 8.0]),
        ];
        for k in 0..6 {
            let x = 10.0 + 20.0 * k as f64;
            for &y in &[-9.0f64, 9.0] {
                primitives.push(Primitive {
                    class: SurfaceClass::Pole,
                    shape: Shape::Cylinder {
                        center: [x, y],
                        radius: 0.15,
                        z_min: 0.0,
                        z_max: 5.0,
                    },
                    transient: false,
                });
            }
        }
        Self {
            name: "street".into(),
            indoor: false,
            density: default_density(),
            primitives,
        }
    }

    /// Axis-aligned bounds of the permanent structure (inclusive).
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for prim in self.primitives.iter().filter(|p| !p.transient) {
            let (a, b) = prim.shape.aabb();
            lo = lo.inf(&a);
            hi = hi.sup(&b);
        }
        (lo, hi)
    }

    /// True when `p` lies inside the permanent-structure bounds (inclusive).
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let (lo, hi) = self.bounds();
        (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
    }

    /// Shortest distance from `p` to any permanent surface.
    pub fn distance_to_surface(&self, p: &Vector3<f64>) -> f64 {
        self.primitives
            .iter()
            .filter(|prim| !prim.transient)
            .map(|prim| prim.shape.surface_distance(p))
            .fold(f64::INFINITY, f64::min)
    }
}

/// A zero-thickness rectangle as a degenerate cuboid.
fn rect(class: SurfaceClass, min: [f64; 3], max: [f64; 3]) -> Primitive {
    Primitive {
        class,
        shape: Shape::Cuboid { min, max },
        transient: false,
    }
}

/// One planar sampling face: origin plus two edge vectors.
struct Face {
    origin: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
}

impl Face {
    fn area(&self) -> f64 {
        self.u.cross(&self.v).norm()
    }
}

impl Shape {
    fn aabb(&self) -> (Vector3<f64>, Vector3<f64>) {
        match *self {
            Shape::Cuboid { min, max } => (Vector3::from(min), Vector3::from(max)),
            Shape::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => (
                Vector3::new(center[0] - radius, center[1] - radius, z_min),
                Vector3::new(center[0] + radius, center[1] + radius, z_max),
            ),
        }
    }

    /// Faces of a cuboid that sampling covers. Coincident face pairs of
    /// degenerate boxes are emitted once, and zero-area faces not at all.
    fn faces(min: Vector3<f64>, max: Vector3<f64>) -> Vec<Face> {
        let e = max - min;
        let ex = Vector3::new(e.x, 0.0, 0.0);
        let ey = Vector3::new(0.0, e.y, 0.0);
        let ez = Vector3::new(0.0, 0.0, e.z);
        let mut faces = Vec::new();
        let mut push = |origin: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>| {
            let f = Face { origin, u, v };
            if f.area() > 0.0 {
                faces.push(f);
            }
        };
        // Perpendicular to z: top always, bottom only for non-degenerate boxes.
        push(Vector3::new(min.x, min.y, max.z), ex, ey);
        if e.z > 0.0 {
            push(min, ex, ey);
            // Perpendicular to y.
            push(min, ex, ez);
            if e.y > 0.0 {
                push(Vector3::new(min.x, max.y, min.z), ex, ez);
            }
            // Perpendicular to x.
            push(min, ey, ez);
            if e.x > 0.0 {
                push(Vector3::new(max.x, min.y, min.z), ey, ez);
            }
        }
        faces
    }

    /// Total area covered by map sampling.
    pub fn sampled_area(&self) -> f64 {
        match *self {
            Shape::Cuboid { min, max } => {
                Self::faces(Vector3::from(min), Vector3::from(max))
                    .iter()
                    .map(Face::area)
                    .sum()
            }
            Shape::Cylinder {
                radius,
                z_min,
                z_max,
                ..
            } => {
                let lateral = 2.0 * std::f64::consts::PI * radius * (z_max - z_min);
                lateral + std::f64::consts::PI * radius * radius
            }
        }
    }

    fn sample_into(&self, density: f64, rng: &mut StdRng, out: &mut Vec<Vector3<f64>>) {
        match *self {
            Shape::Cuboid { min, max } => {
                for face in Self::faces(Vector3::from(min), Vector3::from(max)) {
                    let count = (face.area() * density).round() as usize;
                    for _ in 0..count {
                        let a: f64 = rng.random();
                        let b: f64 = rng.random();
                        out.push(face.origin + face.u * a + face.v * b);
                    }
                }
            }
            Shape::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => {
                let tau = 2.0 * std::f64::consts::PI;
                let lateral = tau * radius * (z_max - z_min);
                for _ in 0..(lateral * density).round() as usize {
                    let theta = rng.random_range(0.0..tau);
                    let z = rng.random_range(z_min..z_max);
                    out.push(Vector3::new(
                        center[0] + radius * theta.cos(),
                        center[1] + radius * theta.sin(),
                        z,
                    ));
                }
                let disc = std::f64::consts::PI * radius * radius;
                for _ in 0..(disc * density).round() as usize {
                    let theta = rng.random_range(0.0..tau);
                    let r = radius * rng.random::<f64>().sqrt();
                    out.push(Vector3::new(
                        center[0] + r * theta.cos(),
                        center[1] + r * theta.sin(),
                        z_max,
                    ));
                }
            }
        }
    }

    /// Distance from `p` to the closed surface of the shape.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            Shape::Cuboid { min, max } => {
                let min = Vector3::from(min);
                let max = Vector3::from(max);
                // Signed distance of an axis-aligned box surface.
                let q = Vector3::new(
                    (min.x - p.x).max(p.x - max.x),
                    (min.y - p.y).max(p.y - max.y),
                    (min.z - p.z).max(p.z - max.z),
                );
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                (outside + inside).abs()
            }
            Shape::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => {
                let dr = ((p.x - center[0]).hypot(p.y - center[1])) - radius;
                let dz = (z_min - p.z).max(p.z - z_max);
                let outside = (dr.max(0.0)).hypot(dz.max(0.0));
                let inside = dr.max(dz).min(0.0);
                (outside + inside).abs()
            }
        }
    }

    /// Smallest `t > t_min` with `origin + t * dir` on the surface.
    fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_min: f64) -> Option<f64> {
        match *self {
            Shape::Cuboid { min, max } => {
                let min = Vector3::from(min);
                let max = Vector3::from(max);
                let mut lo = t_min;
                let mut hi = f64::INFINITY;
                for i in 0..3 {
                    if dir[i] == 0.0 {
                        if origin[i] < min[i] || origin[i] > max[i] {
                            return None;
                        }
                        continue;
                    }
                    let mut t0 = (min[i] - origin[i]) / dir[i];
                    let mut t1 = (max[i] - origin[i]) / dir[i];
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    lo = lo.max(t0);
                    hi = hi.min(t1);
                    if lo > hi {
                        return None;
                    }
                }
                Some(lo)
            }
            Shape::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => {
                let ox = origin.x - center[0];
                let oy = origin.y - center[1];
                let a = dir.x * dir.x + dir.y * dir.y;
                let mut best: Option<f64> = None;
                let mut consider = |t: f64, z_ok: bool| {
                    if t > t_min && z_ok && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                };
                if a > 0.0 {
                    let b = 2.0 * (ox * dir.x + oy * dir.y);
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                            let z = origin.z + t * dir.z;
                            consider(t, z >= z_min && z <= z_max);
                        }
                    }
                }
                if dir.z != 0.0 {
                    let t = (z_max - origin.z) / dir.z;
                    let x = ox + t * dir.x;
                    let y = oy + t * dir.y;
                    consider(t, x * x + y * y <= radius * radius);
                }
                best
            }
        }
    }
}

/// A ray-primitive intersection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter of the hit: metric depth when `dir` is scaled so that
    /// its optical-axis component is 1.
    pub t: f64,
    pub transient: bool,
}

/// Nearest intersection of the ray with any primitive, or `None`.
pub fn raycast(primitives: &[Primitive], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for prim in primitives {
        if let Some(t) = prim.shape.raycast(origin, dir, 1e-9) {
            if best.is_none_or(|h| t < h.t) {
                best = Some(Hit {
                    t,
                    transient: prim.transient,
                });
            }
        }
    }
    best
}

/// A sampled reference map: one surface label per point.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    pub cloud: PointCloud<f64>,
    pub labels: Vec<SurfaceClass>,
}

impl LabeledCloud {
    /// Point count per surface class.
    pub fn histogram(&self) -> BTreeMap<SurfaceClass, usize> {
        let mut hist = BTreeMap::new();
        for label in &self.labels {
            *hist.entry(*label).or_insert(0) += 1;
        }
        hist
    }
}

/// Samples every permanent surface of the world at its area-proportional
/// density. The draw order is fixed by the primitive order, so a given
/// `(spec, seed)` pair always produces the identical cloud.
pub fn build_world(spec: &WorldSpec, seed: u64) -> Result<LabeledCloud, WorldError> {
    if spec.primitives.iter().all(|p| p.transient) {
        return Err(WorldError::Empty(spec.name.clone()));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for prim in spec.primitives.iter().filter(|p| !p.transient) {
        let before = points.len();
        prim.shape.sample_into(spec.density, &mut rng, &mut points);
        labels.resize(labels.len() + (points.len() - before), prim.class);
    }
    Ok(LabeledCloud {
        cloud: PointCloud::new(points, Frame::LocalLevel),
        labels,
    })
}

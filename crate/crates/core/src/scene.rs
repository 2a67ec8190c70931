//! Hand-authored TOML scenes: a pinhole camera, spheres and axis-aligned
//! quads or boxes, per-primitive materials and emission, and a constant
//! environment.
//!
//! ```toml
//! [camera]
//! position = [0.5, 0.5, -1.4]
//! look_at = [0.5, 0.5, 0.5]
//! fov = 40.0
//! resolution = [32, 32]
//!
//! [[primitives]]
//! type = "quad"
//! axis = "y"
//! offset = 0.0
//! min = [0.0, 0.0]
//! max = [1.0, 1.0]
//! facing = 1
//! material = { kind = "lambertian", color = [0.7, 0.7, 0.7] }
//! ```

use std::path::Path;

use nalgebra::Vector3;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::materials::{BsdfKind, Material, Rgb};

/// Minimum ray parameter accepted as a hit.
const T_MIN: f64 = 1e-7;

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
    /// Rectangle on the plane `p[axis] = offset`, spanning `min..max` on the
    /// other two axes in increasing axis order. Emits towards `facing`.
    Quad {
        axis: usize,
        offset: f64,
        min: [f64; 2],
        max: [f64; 2],
        facing: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub material: Material,
    pub emission: Rgb,
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub position: Vector3<f64>,
    /// Outward (sphere) or `facing` (quad) normal.
    pub normal: Vector3<f64>,
    pub primitive: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub position: Vector3<f64>,
    forward: Vector3<f64>,
    right: Vector3<f64>,
    up: Vector3<f64>,
    tan_half: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Ray through film position `(px + u0, py + u1)` in pixels, `py = 0` at the top.
    pub fn ray(&self, px: f64, py: f64) -> Ray {
        let aspect = self.width as f64 / self.height as f64;
        let sx = (2.0 * px / self.width as f64 - 1.0) * self.tan_half * aspect;
        let sy = (1.0 - 2.0 * py / self.height as f64) * self.tan_half;
        Ray { origin: self.position, dir: (self.forward + sx * self.right + sy * self.up).normalize() }
    }
}

/// Optional render settings stored with the scene; command-line values win.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSettings {
    pub spp: Option<u32>,
    pub mode: Option<String>,
    pub seed: Option<u64>,
    pub max_vertices: Option<usize>,
    pub bsdf_fraction: Option<f64>,
    pub iv_combine: Option<bool>,
    /// Center splits per axis of the initial cache grid.
    pub initial_splits: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub camera: Camera,
    pub primitives: Vec<Primitive>,
    pub environment: Rgb,
    pub integrator: IntegratorSettings,
    bounds_min: Vector3<f64>,
    bounds_extent: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    camera: CameraFile,
    #[serde(default)]
    primitives: Vec<PrimitiveFile>,
    environment: Option<EnvironmentFile>,
    integrator: Option<IntegratorSettings>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    position: [f64; 3],
    look_at: [f64; 3],
    up: Option<[f64; 3]>,
    fov: f64,
    resolution: [usize; 2],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvironmentFile {
    radiance: [f64; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MaterialFile {
    kind: String,
    color: [f64; 3],
    #[serde(default)]
    params: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum PrimitiveFile {
    Sphere {
        center: [f64; 3],
        radius: f64,
        material: Option<MaterialFile>,
        emission: Option<[f64; 3]>,
    },
    Quad {
        axis: String,
        offset: f64,
        min: [f64; 2],
        max: [f64; 2],
        facing: i32,
        material: Option<MaterialFile>,
        emission: Option<[f64; 3]>,
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
        material: Option<MaterialFile>,
        emission: Option<[f64; 3]>,
    },
}

fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn bad(msg: String) -> Error {
    Error::Scene(msg)
}

fn check_finite(what: &str, vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(bad(format!("{what} must be finite")))
    }
}

fn radiance(what: &str, v: [f64; 3]) -> Result<Rgb> {
    check_finite(what, &v)?;
    if v.iter().any(|c| *c < 0.0) {
        return Err(bad(format!("{what} must be non-negative, got {v:?}")));
    }
    Ok(vec3(v))
}

fn material(idx: usize, m: Option<MaterialFile>) -> Result<Material> {
    let Some(m) = m else { return Ok(Material::lambertian(Rgb::zeros())) };
    let kind = BsdfKind::from_name(&m.kind).ok_or_else(|| {
        let names: Vec<&str> = BsdfKind::ALL.iter().map(|k| k.name()).collect();
        bad(format!("primitive {idx}: unknown material kind '{}' (expected one of {})", m.kind, names.join(", ")))
    })?;
    if m.params.len() != kind.param_count() {
        return Err(bad(format!(
            "primitive {idx}: material '{}' takes {} params, got {}",
            m.kind,
            kind.param_count(),
            m.params.len()
        )));
    }
    check_finite(&format!("primitive {idx}: material params"), &m.params)?;
    for (v, (lo, hi)) in m.params.iter().zip(kind.param_ranges()) {
        if v < lo || v > hi {
            return Err(bad(format!("primitive {idx}: material param {v} outside [{lo}, {hi}]")));
        }
    }
    let color = vec3(m.color);
    check_finite(&format!("primitive {idx}: material color"), &m.color)?;
    if color.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(bad(format!("primitive {idx}: material color {:?} outside [0, 1]", m.color)));
    }
    Ok(Material::new(kind, &m.params, color))
}

fn axis_index(idx: usize, s: &str) -> Result<usize> {
    match s {
        "x" => Ok(0),
        "y" => Ok(1),
        "z" => Ok(2),
        _ => Err(bad(format!("primitive {idx}: quad axis must be \"x\", \"y\" or \"z\", got \"{s}\""))),
    }
}

/// Other two axes of a quad in increasing order.
fn plane_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

impl Scene {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Scene(m) => Error::Scene(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses and validates a scene. Errors are single-line messages.
    pub fn parse(text: &str) -> Result<Self> {
        let file: SceneFile = toml::from_str(text).map_err(|e| bad(one_line(&e.to_string())))?;
        let cam = camera(file.camera)?;
        let mut primitives = Vec::new();
        for (idx, p) in file.primitives.into_iter().enumerate() {
            match p {
                PrimitiveFile::Sphere { center, radius, material: m, emission } => {
                    check_finite(&format!("primitive {idx}: sphere center"), &center)?;
                    if !(radius > 0.0 && radius.is_finite()) {
                        return Err(bad(format!("primitive {idx}: sphere radius must be positive, got {radius}")));
                    }
                    primitives.push(Primitive {
                        shape: Shape::Sphere { center: vec3(center), radius },
                        material: material(idx, m)?,
                        emission: radiance(&format!("primitive {idx}: emission"), emission.unwrap_or_default())?,
                    });
                }
                PrimitiveFile::Quad { axis, offset, min, max, facing, material: m, emission } => {
                    let axis = axis_index(idx, &axis)?;
                    check_finite(&format!("primitive {idx}: quad extents"), &[offset, min[0], min[1], max[0], max[1]])?;
                    if !(min[0] < max[0] && min[1] < max[1]) {
                        return Err(bad(format!("primitive {idx}: quad min {min:?} must be below max {max:?}")));
                    }
                    if facing != 1 && facing != -1 {
                        return Err(bad(format!("primitive {idx}: quad facing must be 1 or -1, got {facing}")));
                    }
                    primitives.push(Primitive {
                        shape: Shape::Quad { axis, offset, min, max, facing: facing as f64 },
                        material: material(idx, m)?,
                        emission: radiance(&format!("primitive {idx}: emission"), emission.unwrap_or_default())?,
                    });
                }
                PrimitiveFile::Box { min, max, material: m, emission } => {
                    check_finite(&format!("primitive {idx}: box extents"), &[min, max].concat())?;
                    if (0..3).any(|a| min[a] >= max[a]) {
                        return Err(bad(format!("primitive {idx}: box min {min:?} must be below max {max:?}")));
                    }
                    let mat = material(idx, m)?;
                    let em = radiance(&format!("primitive {idx}: emission"), emission.unwrap_or_default())?;
                    for axis in 0..3 {
                        let (a, b) = plane_axes(axis);
                        for (offset, facing) in [(min[axis], -1.0), (max[axis], 1.0)] {
                            primitives.push(Primitive {
                                shape: Shape::Quad {
                                    axis,
                                    offset,
                                    min: [min[a], min[b]],
                                    max: [max[a], max[b]],
                                    facing,
                                },
                                material: mat.clone(),
                                emission: em,
                            });
                        }
                    }
                }
            }
        }
        let environment = match file.environment {
            Some(e) => radiance("environment radiance", e.radiance)?,
            None => Rgb::zeros(),
        };
        let integrator = file.integrator.unwrap_or_default();
        if let Some(f) = integrator.bsdf_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(bad(format!("integrator.bsdf_fraction must be in (0, 1], got {f}")));
            }
        }
        if let Some(s) = integrator.initial_splits {
            if s > 4 {
                return Err(bad(format!("integrator.initial_splits must be at most 4, got {s}")));
            }
        }
        let (bounds_min, bounds_extent) = bounds(&primitives, &cam.position);
        Ok(Scene { camera: cam, primitives, environment, integrator, bounds_min, bounds_extent })
    }

    /// Closest hit along the ray.
    pub fn intersect(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            let t_max = best.map_or(f64::INFINITY, |h| h.t);
            let Some((t, normal)) = intersect_shape(&p.shape, ray, t_max) else { continue };
            best = Some(Hit { t, position: ray.origin + t * ray.dir, normal, primitive: i });
        }
        best
    }

    /// Emitted radiance leaving `hit` towards `-dir`. Emitters are one-sided.
    pub fn emission(&self, hit: &Hit, dir: &Vector3<f64>) -> Rgb {
        let e = self.primitives[hit.primitive].emission;
        if e == Rgb::zeros() || hit.normal.dot(dir) >= 0.0 {
            return Rgb::zeros();
        }
        e
    }

    /// Maps a world position into the unit cube used by the spatial cache.
    pub fn normalize_position(&self, p: &Vector3<f64>) -> [f64; 3] {
        let q = (p - self.bounds_min) / self.bounds_extent;
        [q.x.clamp(0.0, 1.0), q.y.clamp(0.0, 1.0), q.z.clamp(0.0, 1.0)]
    }

    /// Length of the cube edge in world units.
    pub fn extent(&self) -> f64 {
        self.bounds_extent
    }

    pub fn materials(&self) -> impl Iterator<Item = &Material> {
        self.primitives.iter().map(|p| &p.material)
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn camera(c: CameraFile) -> Result<Camera> {
    check_finite("camera", &[c.position, c.look_at, c.up.unwrap_or([0.0, 1.0, 0.0])].concat())?;
    if !(c.fov > 0.0 && c.fov < 180.0) {
        return Err(bad(format!("camera.fov must be in (0, 180) degrees, got {}", c.fov)));
    }
    if c.resolution[0] == 0 || c.resolution[1] == 0 {
        return Err(bad(format!("camera.resolution must be positive, got {:?}", c.resolution)));
    }
    let position = vec3(c.position);
    let forward = vec3(c.look_at) - position;
    if forward.norm() < 1e-12 {
        return Err(bad("camera.look_at coincides with camera.position".into()));
    }
    let forward = forward.normalize();
    let up_hint = vec3(c.up.unwrap_or([0.0, 1.0, 0.0]));
    let right = forward.cross(&up_hint);
    if right.norm() < 1e-9 {
        return Err(bad("camera.up is parallel to the viewing direction".into()));
    }
    let right = right.normalize();
    let up = right.cross(&forward);
    Ok(Camera {
        position,
        forward,
        right,
        up,
        tan_half: (0.5 * c.fov.to_radians()).tan(),
        width: c.resolution[0],
        height: c.resolution[1],
    })
}

/// Cube enclosing all primitives (the camera when there are none), padded by 1%.
fn bounds(prims: &[Primitive], fallback: &Vector3<f64>) -> (Vector3<f64>, f64) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    let mut grow = |p: Vector3<f64>| {
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    };
    for p in prims {
        match p.shape {
            Shape::Sphere { center, radius } => {
                grow(center - Vector3::repeat(radius));
                grow(center + Vector3::repeat(radius));
            }
            Shape::Quad { axis, offset, min, max, .. } => {
                let (a, b) = plane_axes(axis);
                let mut p0 = Vector3::zeros();
                let mut p1 = Vector3::zeros();
                p0[axis] = offset;
                p1[axis] = offset;
                p0[a] = min[0];
                p0[b] = min[1];
                p1[a] = max[0];
                p1[b] = max[1];
                grow(p0);
                grow(p1);
            }
        }
    }
    if prims.is_empty() {
        grow(*fallback);
    }
    let extent = (hi - lo).max().max(1e-6) * 1.02;
    let center = 0.5 * (lo + hi);
    (center - Vector3::repeat(0.5 * extent), extent)
}

fn intersect_shape(shape: &Shape, ray: &Ray, t_max: f64) -> Option<(f64, Vector3<f64>)> {
    match *shape {
        Shape::Sphere { center, radius } => {
            let oc = ray.origin - center;
            let b = oc.dot(&ray.dir);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = if -b - s > T_MIN { -b - s } else { -b + s };
            if t <= T_MIN || t >= t_max {
                return None;
            }
            let n = (ray.origin + t * ray.dir - center) / radius;
            Some((t, n))
        }
        Shape::Quad { axis, offset, min, max, facing } => {
            let d = ray.dir[axis];
            if d.abs() < 1e-12 {
                return None;
            }
            let t = (offset - ray.origin[axis]) / d;
            if t <= T_MIN || t >= t_max {
                return None;
            }
            let (a, b) = plane_axes(axis);
            let pa = ray.origin[a] + t * ray.dir[a];
            let pb = ray.origin[b] + t * ray.dir[b];
            if pa < min[0] || pa > max[0] || pb < min[1] || pb > max[1] {
                return None;
            }
            let mut n = Vector3::zeros();
            n[axis] = facing;
            Some((t, n))
        }
    }
}

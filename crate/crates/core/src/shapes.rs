//! Analytic signed distance shapes and their CSG combinations.
//!
//! Used both as the procedural training corpus and as synthetic scenes for
//! rendering and ground-truth evaluation. Distances are in meters.

use std::fmt;

use nalgebra::{UnitQuaternion, Vector2, Vector3};

use crate::geometry::Pose;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Sphere { radius: f64 },
    /// Axis-aligned box with the given half extents.
    Cuboid { half: Vector3<f64> },
    /// Torus around the local z axis.
    Torus { major: f64, minor: f64 },
    /// Half-space `n·x ≤ offset` (solid below the plane).
    Plane { normal: Vector3<f64>, offset: f64 },
}

impl Primitive {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Sphere { radius } => p.norm() - radius,
            Primitive::Cuboid { half } => {
                let q = p.abs() - half;
                let outside = q.sup(&Vector3::zeros()).norm();
                outside + q.max().min(0.0)
            }
            Primitive::Torus { major, minor } => {
                let q = Vector2::new(p.xy().norm() - major, p.z);
                q.norm() - minor
            }
            Primitive::Plane { normal, offset } => normal.dot(p) - offset,
        }
    }

    pub fn gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Primitive::Sphere { .. } => {
                let n = p.norm();
                if n > 0.0 {
                    p / n
                } else {
                    Vector3::z()
                }
            }
            Primitive::Cuboid { half } => {
                let q = p.abs() - half;
                let sign = p.map(|c| if c < 0.0 { -1.0 } else { 1.0 });
                if q.max() > 0.0 {
                    let outside = q.sup(&Vector3::zeros());
                    (outside / outside.norm()).component_mul(&sign)
                } else {
                    let axis = q.imax();
                    let mut g = Vector3::zeros();
                    g[axis] = sign[axis];
                    g
                }
            }
            Primitive::Torus { major, .. } => {
                let rho = p.xy().norm();
                let radial = if rho > 0.0 {
                    Vector2::new(p.x / rho, p.y / rho)
                } else {
                    Vector2::new(1.0, 0.0)
                };
                let q = Vector2::new(rho - major, p.z);
                let qn = q.norm();
                let q = if qn > 0.0 { q / qn } else { Vector2::new(1.0, 0.0) };
                Vector3::new(q.x * radial.x, q.x * radial.y, q.y)
            }
            Primitive::Plane { normal, .. } => *normal,
        }
    }
}

/// A primitive placed in the world by a rigid pose and a uniform scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Placed {
    pub primitive: Primitive,
    /// Object-to-world transform.
    pub pose: Pose,
    pub scale: f64,
}

impl Placed {
    pub fn new(primitive: Primitive) -> Self {
        Self {
            primitive,
            pose: Pose::identity(),
            scale: 1.0,
        }
    }

    pub fn at(mut self, translation: Vector3<f64>) -> Self {
        self.pose.translation = translation;
        self
    }

    pub fn rotated(mut self, rotation: UnitQuaternion<f64>) -> Self {
        self.pose.rotation = rotation;
        self
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    fn to_local(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.pose.inverse().transform_point(x) / self.scale
    }

    pub fn sdf(&self, x: &Vector3<f64>) -> f64 {
        self.scale * self.primitive.sdf(&self.to_local(x))
    }

    pub fn gradient(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.pose.transform_vector(&self.primitive.gradient(&self.to_local(x)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Primitive(Placed),
    Union(Vec<Shape>),
    Intersection(Vec<Shape>),
    /// `a` minus `b`.
    Difference(Box<Shape>, Box<Shape>),
    /// Swaps inside and outside, e.g. the free space of a room is the
    /// complement of a solid box.
    Complement(Box<Shape>),
}

impl From<Placed> for Shape {
    fn from(p: Placed) -> Self {
        Shape::Primitive(p)
    }
}

impl Shape {
    pub fn sphere(center: Vector3<f64>, radius: f64) -> Shape {
        Placed::new(Primitive::Sphere { radius }).at(center).into()
    }

    pub fn cuboid(center: Vector3<f64>, half: Vector3<f64>) -> Shape {
        Placed::new(Primitive::Cuboid { half }).at(center).into()
    }

    /// Solid half-space below the plane `n·x = offset`.
    pub fn plane(normal: Vector3<f64>, offset: f64) -> Shape {
        Placed::new(Primitive::Plane {
            normal: normal.normalize(),
            offset,
        })
        .into()
    }

    pub fn sdf(&self, x: &Vector3<f64>) -> f64 {
        self.sdf_and_gradient(x).0
    }

    pub fn gradient(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.sdf_and_gradient(x).1
    }

    /// Distance and the gradient of the branch that is active at `x`.
    pub fn sdf_and_gradient(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
        match self {
            Shape::Primitive(p) => (p.sdf(x), p.gradient(x)),
            Shape::Union(parts) => parts
                .iter()
                .map(|s| s.sdf_and_gradient(x))
                .fold((f64::INFINITY, Vector3::z()), |acc, cur| if cur.0 < acc.0 { cur } else { acc }),
            Shape::Intersection(parts) => parts
                .iter()
                .map(|s| s.sdf_and_gradient(x))
                .fold((f64::NEG_INFINITY, Vector3::z()), |acc, cur| if cur.0 > acc.0 { cur } else { acc }),
            Shape::Difference(a, b) => {
                let (da, ga) = a.sdf_and_gradient(x);
                let (db, gb) = b.sdf_and_gradient(x);
                if da >= -db {
                    (da, ga)
                } else {
                    (-db, -gb)
                }
            }
            Shape::Complement(inner) => {
                let (d, g) = inner.sdf_and_gradient(x);
                (-d, -g)
            }
        }
    }

    /// Moves `x` onto the zero level set by repeated gradient steps.
    /// Exact in one step for primitives; CSG corners may need a few.
    pub fn project_to_surface(&self, x: &Vector3<f64>) -> Option<Vector3<f64>> {
        let mut p = *x;
        for _ in 0..8 {
            let (d, g) = self.sdf_and_gradient(&p);
            if d.abs() < 1e-12 {
                return Some(p);
            }
            p -= g * d;
        }
        (self.sdf(&p).abs() < 1e-9).then_some(p)
    }

    /// Number of primitives in the tree.
    pub fn primitive_count(&self) -> usize {
        match self {
            Shape::Primitive(_) => 1,
            Shape::Union(v) | Shape::Intersection(v) => v.iter().map(Shape::primitive_count).sum(),
            Shape::Difference(a, b) => a.primitive_count() + b.primitive_count(),
            Shape::Complement(a) => a.primitive_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("shape syntax: {0}")]
pub struct ShapeParseError(pub String);

/// S-expression token stream.
fn tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '(' | ')' => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

struct Parser {
    tokens: Vec<String>,
    pos: usize,
}

impl Parser {
    fn next(&mut self) -> Result<String, ShapeParseError> {
        let t = self
            .tokens
            .get(self.pos)
            .cloned()
            .ok_or_else(|| ShapeParseError("unexpected end of input".into()))?;
        self.pos += 1;
        Ok(t)
    }

    fn peek(&self) -> Option<&str> {
        self.tokens.get(self.pos).map(String::as_str)
    }

    fn expect(&mut self, tok: &str) -> Result<(), ShapeParseError> {
        let t = self.next()?;
        if t == tok {
            Ok(())
        } else {
            Err(ShapeParseError(format!("expected '{tok}', found '{t}'")))
        }
    }

    fn number(&mut self) -> Result<f64, ShapeParseError> {
        let t = self.next()?;
        let v: f64 = t.parse().map_err(|_| ShapeParseError(format!("expected a number, found '{t}'")))?;
        if !v.is_finite() {
            return Err(ShapeParseError(format!("non-finite number '{t}'")));
        }
        Ok(v)
    }

    fn numbers<const N: usize>(&mut self) -> Result<[f64; N], ShapeParseError> {
        let mut out = [0.0; N];
        for v in out.iter_mut() {
            *v = self.number()?;
        }
        Ok(out)
    }

    fn positive(&mut self, what: &str) -> Result<f64, ShapeParseError> {
        let v = self.number()?;
        if v <= 0.0 {
            return Err(ShapeParseError(format!("{what} must be positive, got {v}")));
        }
        Ok(v)
    }

    fn shape(&mut self) -> Result<Shape, ShapeParseError> {
        self.expect("(")?;
        let head = self.next()?;
        let shape = match head.as_str() {
            "union" | "intersect" => {
                let mut parts = Vec::new();
                while self.peek() == Some("(") {
                    parts.push(self.shape()?);
                }
                if parts.is_empty() {
                    return Err(ShapeParseError(format!("'{head}' needs at least one operand")));
                }
                if head == "union" {
                    Shape::Union(parts)
                } else {
                    Shape::Intersection(parts)
                }
            }
            "difference" => {
                let a = self.shape()?;
                let b = self.shape()?;
                Shape::Difference(Box::new(a), Box::new(b))
            }
            "complement" => Shape::Complement(Box::new(self.shape()?)),
            "sphere" => {
                let radius = self.positive("radius")?;
                self.placed(Primitive::Sphere { radius })?
            }
            "cuboid" => {
                let half = Vector3::new(
                    self.positive("half extent")?,
                    self.positive("half extent")?,
                    self.positive("half extent")?,
                );
                self.placed(Primitive::Cuboid { half })?
            }
            "torus" => {
                let major = self.positive("major radius")?;
                let minor = self.positive("minor radius")?;
                self.placed(Primitive::Torus { major, minor })?
            }
            "plane" => {
                let [x, y, z, offset] = self.numbers::<4>()?;
                let normal = Vector3::new(x, y, z);
                if normal.norm() == 0.0 {
                    return Err(ShapeParseError("plane normal is zero".into()));
                }
                self.placed(Primitive::Plane {
                    normal: normal.normalize(),
                    offset,
                })?
            }
            other => return Err(ShapeParseError(format!("unknown shape '{other}'"))),
        };
        self.expect(")")?;
        Ok(shape)
    }

    fn placed(&mut self, primitive: Primitive) -> Result<Shape, ShapeParseError> {
        let mut placed = Placed::new(primitive);
        while let Some(key) = self.peek().filter(|t| t.starts_with(':')).map(str::to_string) {
            self.pos += 1;
            match key.as_str() {
                ":at" => placed.pose.translation = Vector3::from(self.numbers::<3>()?),
                ":rot" => {
                    let q = self.numbers::<4>()?;
                    if q.iter().map(|v| v * v).sum::<f64>() == 0.0 {
                        return Err(ShapeParseError("zero quaternion".into()));
                    }
                    placed.pose = Pose::from_quaternion_xyzw(q, placed.pose.translation);
                }
                ":scale" => placed.scale = self.positive("scale")?,
                other => return Err(ShapeParseError(format!("unknown modifier '{other}'"))),
            }
        }
        Ok(placed.into())
    }
}

impl std::str::FromStr for Shape {
    type Err = ShapeParseError;

    /// Parses `(sphere R)`, `(cuboid hx hy hz)`, `(torus R r)`,
    /// `(plane nx ny nz d)` with optional `:at x y z`, `:rot qx qy qz qw`
    /// and `:scale s`, combined with `union`, `intersect`, `difference`
    /// and `complement`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = Parser {
            tokens: tokenize(s),
            pos: 0,
        };
        let shape = p.shape()?;
        if let Some(t) = p.peek() {
            return Err(ShapeParseError(format!("trailing input at '{t}'")));
        }
        Ok(shape)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |f: &mut fmt::Formatter<'_>, head: &str, parts: &[&Shape]| {
            write!(f, "({head}")?;
            for p in parts {
                write!(f, " {p}")?;
            }
            write!(f, ")")
        };
        match self {
            Shape::Union(v) => list(f, "union", &v.iter().collect::<Vec<_>>()),
            Shape::Intersection(v) => list(f, "intersect", &v.iter().collect::<Vec<_>>()),
            Shape::Difference(a, b) => list(f, "difference", &[a, b]),
            Shape::Complement(a) => list(f, "complement", &[a]),
            Shape::Primitive(p) => {
                match &p.primitive {
                    Primitive::Sphere { radius } => write!(f, "(sphere {radius}")?,
                    Primitive::Cuboid { half } => write!(f, "(cuboid {} {} {}", half.x, half.y, half.z)?,
                    Primitive::Torus { major, minor } => write!(f, "(torus {major} {minor}")?,
                    Primitive::Plane { normal, offset } => {
                        write!(f, "(plane {} {} {} {offset}", normal.x, normal.y, normal.z)?
                    }
                }
                let t = p.pose.translation;
                if t != Vector3::zeros() {
                    write!(f, " :at {} {} {}", t.x, t.y, t.z)?;
                }
                let q = p.pose.quaternion_xyzw();
                if q != [0.0, 0.0, 0.0, 1.0] {
                    write!(f, " :rot {} {} {} {}", q[0], q[1], q[2], q[3])?;
                }
                if p.scale != 1.0 {
                    write!(f, " :scale {}", p.scale)?;
                }
                write!(f, ")")
            }
        }
    }
}

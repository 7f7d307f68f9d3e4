//! Procedural shape corpus and its text manifest.
//!
//! Manifest lines are either a shape expression, `procedural COUNT SEED`
//! (appends generated shapes), or `extent R` (half-width of the region in
//! which surface voxels are drawn). `#` starts a comment.

use std::fmt::Write as _;

use nalgebra::{UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::PriorError;
use crate::shapes::{Placed, Primitive, Shape};

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeCorpus {
    pub shapes: Vec<Shape>,
    /// Surface voxels are drawn from `[-extent, extent]³`.
    pub extent: f64,
}

const DEFAULT_EXTENT: f64 = 6.0;

impl ShapeCorpus {
    pub fn new(shapes: Vec<Shape>) -> Self {
        Self {
            shapes,
            extent: DEFAULT_EXTENT,
        }
    }

    /// `count` random shapes sized for a unit voxel.
    pub fn procedural(count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new((0..count).map(|_| procedural_shape(&mut rng)).collect())
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn parse_manifest(text: &str) -> Result<Self, PriorError> {
        let mut corpus = Self::new(Vec::new());
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| PriorError::Manifest { line: i + 1, message };
            let mut words = line.split_whitespace();
            match words.next() {
                Some("procedural") => {
                    let count: usize = words
                        .next()
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| err("expected 'procedural COUNT SEED'".into()))?;
                    let seed: u64 = words
                        .next()
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| err("expected 'procedural COUNT SEED'".into()))?;
                    corpus.shapes.extend(Self::procedural(count, seed).shapes);
                }
                Some("extent") => {
                    corpus.extent = words
                        .next()
                        .and_then(|w| w.parse().ok())
                        .filter(|e: &f64| *e > 0.0)
                        .ok_or_else(|| err("expected 'extent R' with R > 0".into()))?;
                }
                _ => corpus.shapes.push(line.parse().map_err(|e| err(format!("{e}")))?),
            }
        }
        Ok(corpus)
    }

    pub fn to_manifest(&self) -> String {
        let mut out = format!("extent {}\n", self.extent);
        for s in &self.shapes {
            let _ = writeln!(out, "{s}");
        }
        out
    }
}

fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    let q = Vector4::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    );
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(q))
}

/// Mostly axis-aligned orientations, since indoor structure is.
fn orientation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    if rng.random_bool(0.4) {
        UnitQuaternion::identity()
    } else {
        random_rotation(rng)
    }
}

fn offset(rng: &mut impl Rng, r: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

fn half_extents(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::new(rng.random_range(0.5..5.0), rng.random_range(0.5..5.0), rng.random_range(0.5..5.0))
}

fn primitive(rng: &mut impl Rng) -> Shape {
    let p = match rng.random_range(0..10) {
        0..=2 => Primitive::Sphere {
            radius: rng.random_range(0.5..6.0),
        },
        3..=7 => Primitive::Cuboid { half: half_extents(rng) },
        _ => {
            let minor = rng.random_range(0.3..1.5);
            Primitive::Torus {
                major: minor + rng.random_range(0.5..4.0),
                minor,
            }
        }
    };
    Placed::new(p).rotated(orientation(rng)).at(offset(rng, 1.0)).into()
}

fn plane(rng: &mut impl Rng) -> Shape {
    let n = if rng.random_bool(0.5) {
        let mut n = Vector3::zeros();
        n[rng.random_range(0..3)] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        n
    } else {
        random_rotation(rng) * Vector3::z()
    };
    Shape::plane(n, rng.random_range(-1.0..1.0))
}

/// One random corpus shape: primitives, planes, unions, differences,
/// objects resting on planes and room-like box interiors.
pub fn procedural_shape(rng: &mut impl Rng) -> Shape {
    match rng.random_range(0..20) {
        0..=6 => primitive(rng),
        7..=8 => plane(rng),
        9..=11 => Shape::Union((0..rng.random_range(2..4)).map(|_| primitive(rng)).collect()),
        12..=13 => {
            // notch cut at a surface point of the base so the result is never empty
            let base = primitive(rng);
            let dir = random_rotation(rng) * Vector3::z();
            let at = base.project_to_surface(&(dir * 10.0)).unwrap_or_else(Vector3::zeros);
            let cutter = match rng.random_range(0..2) {
                0 => Primitive::Sphere {
                    radius: rng.random_range(0.5..2.5),
                },
                _ => Primitive::Cuboid {
                    half: Vector3::new(rng.random_range(0.5..2.5), rng.random_range(0.5..2.5), rng.random_range(0.5..2.5)),
                },
            };
            let cutter = Placed::new(cutter).rotated(orientation(rng)).at(at).into();
            Shape::Difference(Box::new(base), Box::new(cutter))
        }
        14..=16 => {
            // object standing on a floor: concave contact edges
            let floor = Shape::plane(Vector3::z(), 0.0);
            let half = half_extents(rng);
            let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rng.random_range(0.0..std::f64::consts::PI));
            let object = Placed::new(Primitive::Cuboid { half })
                .rotated(if rng.random_bool(0.5) { UnitQuaternion::identity() } else { rot })
                .at(Vector3::new(0.0, 0.0, half.z - rng.random_range(0.0..0.5)))
                .into();
            Shape::Union(vec![floor, object])
        }
        _ => {
            let room = Placed::new(Primitive::Cuboid {
                half: half_extents(rng) + Vector3::repeat(1.0),
            })
            .rotated(orientation(rng))
            .into();
            Shape::Complement(Box::new(room))
        }
    }
}

//! Binary little-endian PLY and Wavefront OBJ.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use thiserror::Error;

use super::TriangleMesh;

#[derive(Debug, Error)]
pub enum MeshIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed PLY: {0}")]
    Malformed(String),
    #[error("invalid mesh: {0}")]
    Invalid(String),
}

fn header(mesh: &TriangleMesh) -> String {
    let mut h = String::from("ply\nformat binary_little_endian 1.0\n");
    h += &format!("element vertex {}\n", mesh.vertices.len());
    h += "property double x\nproperty double y\nproperty double z\n";
    if mesh.colors.is_some() {
        h += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    }
    if mesh.sigma.is_some() {
        h += "property float sigma\n";
    }
    h += &format!("element face {}\n", mesh.triangles.len());
    h += "property list uchar int vertex_indices\nend_header\n";
    h
}

pub fn write_ply_to<W: Write>(mesh: &TriangleMesh, mut w: W) -> Result<(), MeshIoError> {
    mesh.validate().map_err(MeshIoError::Invalid)?;
    w.write_all(header(mesh).as_bytes())?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in v.iter() {
            w.write_f64::<LittleEndian>(*c)?;
        }
        if let Some(colors) = &mesh.colors {
            w.write_all(&colors[i])?;
        }
        if let Some(s) = &mesh.sigma {
            w.write_f32::<LittleEndian>(s[i])?;
        }
    }
    for t in &mesh.triangles {
        w.write_u8(3)?;
        for &i in t {
            w.write_i32::<LittleEndian>(i as i32)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes through a temporary file and renames it into place.
pub fn write_ply(mesh: &TriangleMesh, path: &Path) -> Result<(), MeshIoError> {
    let tmp = path.with_extension("ply.tmp");
    write_ply_to(mesh, BufWriter::new(File::create(&tmp)?))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    U8,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Result<Self, MeshIoError> {
        Ok(match s {
            "uchar" | "uint8" => Scalar::U8,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(MeshIoError::Malformed(format!("unsupported property type '{other}'"))),
        })
    }

    fn read<R: Read>(self, r: &mut R) -> Result<f64, MeshIoError> {
        let eof = |e: std::io::Error| MeshIoError::Malformed(format!("truncated body: {e}"));
        Ok(match self {
            Scalar::U8 => r.read_u8().map_err(eof)? as f64,
            Scalar::I32 => r.read_i32::<LittleEndian>().map_err(eof)? as f64,
            Scalar::U32 => r.read_u32::<LittleEndian>().map_err(eof)? as f64,
            Scalar::F32 => r.read_f32::<LittleEndian>().map_err(eof)? as f64,
            Scalar::F64 => r.read_f64::<LittleEndian>().map_err(eof)?,
        })
    }
}

pub fn read_ply_from<R: BufRead>(mut r: R) -> Result<TriangleMesh, MeshIoError> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String, MeshIoError> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(MeshIoError::Malformed("header ended early".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(MeshIoError::Malformed("missing 'ply' magic".into()));
    }
    let mut vertex_count = 0usize;
    let mut face_count = 0usize;
    let mut vertex_props: Vec<(String, Scalar)> = Vec::new();
    let mut face_list: Option<(Scalar, Scalar)> = None;
    let mut current = "";
    loop {
        let l = next_line(&mut r)?;
        let words: Vec<&str> = l.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => return Err(MeshIoError::Malformed(format!("unsupported format '{other}'"))),
            ["comment", ..] | [] => {}
            ["element", "vertex", n] => {
                vertex_count = n.parse().map_err(|_| MeshIoError::Malformed(format!("bad vertex count '{n}'")))?;
                current = "vertex";
            }
            ["element", "face", n] => {
                face_count = n.parse().map_err(|_| MeshIoError::Malformed(format!("bad face count '{n}'")))?;
                current = "face";
            }
            ["property", "list", count, index, _] if current == "face" => {
                face_list = Some((Scalar::parse(count)?, Scalar::parse(index)?));
            }
            ["property", ty, name] if current == "vertex" => vertex_props.push((name.to_string(), Scalar::parse(ty)?)),
            ["end_header"] => break,
            _ => return Err(MeshIoError::Malformed(format!("unexpected header line '{l}'"))),
        }
    }
    let has = |n: &str| vertex_props.iter().any(|(p, _)| p == n);
    for axis in ["x", "y", "z"] {
        if !has(axis) {
            return Err(MeshIoError::Malformed(format!("vertex property '{axis}' missing")));
        }
    }
    let mut mesh = TriangleMesh {
        colors: has("red").then(Vec::new),
        sigma: has("sigma").then(Vec::new),
        ..Default::default()
    };
    for _ in 0..vertex_count {
        let mut p = Vector3::zeros();
        let mut rgb = [0u8; 3];
        for (name, ty) in &vertex_props {
            // keep f32 sigma bit-exact instead of widening
            if name == "sigma" && *ty == Scalar::F32 {
                let s = r.read_f32::<LittleEndian>().map_err(|e| MeshIoError::Malformed(format!("truncated body: {e}")))?;
                mesh.sigma.as_mut().unwrap().push(s);
                continue;
            }
            let v = ty.read(&mut r)?;
            match name.as_str() {
                "x" => p.x = v,
                "y" => p.y = v,
                "z" => p.z = v,
                "red" => rgb[0] = v as u8,
                "green" => rgb[1] = v as u8,
                "blue" => rgb[2] = v as u8,
                "sigma" => mesh.sigma.as_mut().unwrap().push(v as f32),
                _ => {}
            }
        }
        mesh.vertices.push(p);
        if let Some(c) = mesh.colors.as_mut() {
            c.push(rgb);
        }
    }
    if face_count > 0 {
        let (count_ty, index_ty) = face_list.ok_or_else(|| MeshIoError::Malformed("face element without vertex_indices list".into()))?;
        for _ in 0..face_count {
            let n = count_ty.read(&mut r)? as usize;
            if n != 3 {
                return Err(MeshIoError::Malformed(format!("only triangles are supported, found a {n}-gon")));
            }
            let mut t = [0u32; 3];
            for i in t.iter_mut() {
                *i = index_ty.read(&mut r)? as u32;
            }
            mesh.triangles.push(t);
        }
    }
    mesh.validate().map_err(MeshIoError::Invalid)?;
    Ok(mesh)
}

pub fn read_ply(path: &Path) -> Result<TriangleMesh, MeshIoError> {
    read_ply_from(BufReader::new(File::open(path)?))
}

/// OBJ with optional per-vertex colors as the common `v x y z r g b`
/// extension.
pub fn write_obj(mesh: &TriangleMesh, path: &Path) -> Result<(), MeshIoError> {
    mesh.validate().map_err(MeshIoError::Invalid)?;
    let mut w = BufWriter::new(File::create(path)?);
    for (i, v) in mesh.vertices.iter().enumerate() {
        match &mesh.colors {
            Some(c) => {
                let [r, g, b] = c[i].map(|x| x as f64 / 255.0);
                writeln!(w, "v {} {} {} {r} {g} {b}", v.x, v.y, v.z)?;
            }
            None => writeln!(w, "v {} {} {}", v.x, v.y, v.z)?,
        }
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

//! Surface mesh writers: Wavefront OBJ (text) and binary little-endian PLY.
//!
//! Both formats carry the node tags: OBJ as named groups of points and
//! lines, PLY as a per-vertex `uchar tag` property explained in comments.

use std::io::Write;

use crate::conjugate::{SurfaceMesh, SurfaceTags};
use crate::error::Result;

/// Writes `v`, `f`, and the tagged groups `gamma` (closed line), `z0`, `z1`,
/// and `truncation` (point sets). Indices are 1-based.
pub fn write_obj<W: Write>(surface: &SurfaceMesh, mut out: W) -> Result<()> {
    writeln!(out, "# conjugate surface: {} vertices, {} faces", surface.nodes.len(), surface.triangles.len())?;
    for p in &surface.nodes {
        writeln!(out, "v {:.17e} {:.17e} {:.17e}", p[0], p[1], p[2])?;
    }
    writeln!(out, "g surface")?;
    for t in &surface.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    if !surface.gamma.is_empty() {
        writeln!(out, "g gamma")?;
        write!(out, "l")?;
        for &i in surface.gamma.iter().chain(surface.gamma.first()) {
            write!(out, " {}", i + 1)?;
        }
        writeln!(out)?;
    }
    for (name, flag) in [("z0", SurfaceTags::Z0), ("z1", SurfaceTags::Z1), ("truncation", SurfaceTags::TRUNCATION)] {
        let members: Vec<usize> = (0..surface.nodes.len()).filter(|&i| surface.tags[i].has(flag)).collect();
        if members.is_empty() {
            continue;
        }
        writeln!(out, "g {name}")?;
        for chunk in members.chunks(16) {
            write!(out, "p")?;
            for i in chunk {
                write!(out, " {}", i + 1)?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Binary little-endian PLY with `double` coordinates and a `uchar tag` per vertex.
pub fn write_ply<W: Write>(surface: &SurfaceMesh, mut out: W) -> Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format binary_little_endian 1.0")?;
    writeln!(out, "comment tag bit 1: z0 curve (height 0)")?;
    writeln!(out, "comment tag bit 2: z1 curve (height 1)")?;
    writeln!(out, "comment tag bit 4: gamma (puncture ring image)")?;
    writeln!(out, "comment tag bit 8: truncation edge")?;
    writeln!(out, "element vertex {}", surface.nodes.len())?;
    writeln!(out, "property double x")?;
    writeln!(out, "property double y")?;
    writeln!(out, "property double z")?;
    writeln!(out, "property uchar tag")?;
    writeln!(out, "element face {}", surface.triangles.len())?;
    writeln!(out, "property list uchar int vertex_indices")?;
    writeln!(out, "end_header")?;
    let mut buf = Vec::with_capacity(surface.nodes.len() * 25 + surface.triangles.len() * 13);
    for (p, tag) in surface.nodes.iter().zip(&surface.tags) {
        for c in p {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        buf.push(tag.0);
    }
    for t in &surface.triangles {
        buf.push(3);
        for &i in t {
            buf.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conjugate::build_surface;
    use crate::mesh::mesh_rectangle;
    use crate::solver::ScalarField;
    use std::sync::Arc;

    fn plane() -> SurfaceMesh {
        let mesh = Arc::new(mesh_rectangle([0.0, 0.0], [1.0, 1.0], 2, 2));
        let values = mesh.nodes.iter().map(|p| 0.6 * p[1]).collect();
        build_surface(&ScalarField::from_values(mesh, values), 0).unwrap()
    }

    #[test]
    fn obj_lists_every_vertex_and_face() {
        let s = plane();
        let mut buf = Vec::new();
        write_obj(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), s.nodes.len());
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), s.triangles.len());
    }

    #[test]
    fn ply_body_has_the_declared_size() {
        let s = plane();
        let mut buf = Vec::new();
        write_ply(&s, &mut buf).unwrap();
        let header_end = buf.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        assert_eq!(buf.len() - header_end, s.nodes.len() * 25 + s.triangles.len() * 13);
        let x = f64::from_le_bytes(buf[header_end..header_end + 8].try_into().unwrap());
        assert_eq!(x, s.nodes[0][0]);
    }
}

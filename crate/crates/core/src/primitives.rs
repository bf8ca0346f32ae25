//! Procedural meshes used by the toy benchmark and the tests.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::geom::{self, Vec3};
use crate::mesh_io::Mesh;

/// The five primitive classes of the toy benchmark.
pub const PRIMITIVE_CLASSES: [&str; 5] = ["box", "sphere", "cone", "cylinder", "torus"];

pub fn by_name(name: &str) -> Option<Mesh> {
    match name {
        "box" => Some(cuboid([1.0, 0.7, 0.5])),
        "sphere" => Some(icosphere(3)),
        "cone" => Some(cone(0.6, 1.4, 48)),
        "cylinder" => Some(cylinder(0.5, 1.4, 48)),
        "torus" => Some(torus(0.7, 0.25, 48, 24)),
        _ => None,
    }
}

fn mesh(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Mesh {
    Mesh {
        vertices,
        triangles,
    }
}

/// Axis-aligned box centered at the origin with the given edge lengths.
pub fn cuboid(size: [f64; 3]) -> Mesh {
    let h = geom::scale(size, 0.5);
    let mut v = Vec::with_capacity(8);
    for i in 0..8 {
        v.push([
            if i & 1 == 0 { -h[0] } else { h[0] },
            if i & 2 == 0 { -h[1] } else { h[1] },
            if i & 4 == 0 { -h[2] } else { h[2] },
        ]);
    }
    let quads = [
        [0, 2, 3, 1],
        [4, 5, 7, 6],
        [0, 1, 5, 4],
        [2, 6, 7, 3],
        [0, 4, 6, 2],
        [1, 3, 7, 5],
    ];
    let t = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    mesh(v, t)
}

/// Unit icosphere with `subdivisions` rounds of midpoint subdivision.
pub fn icosphere(subdivisions: u32) -> Mesh {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ]
    .iter()
    .map(|&p| geom::normalize(p))
    .collect();
    let mut t: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, v: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                let m = geom::normalize(geom::scale(
                    geom::add(v[a as usize], v[b as usize]),
                    0.5,
                ));
                v.push(m);
                (v.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(t.len() * 4);
        for &[a, b, c] in &t {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        t = next;
    }
    mesh(v, t)
}

/// Closed cylinder along +Z, centered at the origin.
pub fn cylinder(radius: f64, height: f64, segments: u32) -> Mesh {
    let h = height / 2.0;
    let mut v = vec![[0.0, 0.0, -h], [0.0, 0.0, h]];
    for i in 0..segments {
        let a = 2.0 * PI * i as f64 / segments as f64;
        v.push([radius * a.cos(), radius * a.sin(), -h]);
        v.push([radius * a.cos(), radius * a.sin(), h]);
    }
    let mut t = Vec::new();
    for i in 0..segments {
        let j = (i + 1) % segments;
        let (b0, t0, b1, t1) = (2 + 2 * i, 3 + 2 * i, 2 + 2 * j, 3 + 2 * j);
        t.push([b0, b1, t1]);
        t.push([b0, t1, t0]);
        t.push([0, b1, b0]);
        t.push([1, t0, t1]);
    }
    mesh(v, t)
}

/// Closed cone along +Z with its base at `-height/2`.
pub fn cone(radius: f64, height: f64, segments: u32) -> Mesh {
    let h = height / 2.0;
    let mut v = vec![[0.0, 0.0, -h], [0.0, 0.0, h]];
    for i in 0..segments {
        let a = 2.0 * PI * i as f64 / segments as f64;
        v.push([radius * a.cos(), radius * a.sin(), -h]);
    }
    let mut t = Vec::new();
    for i in 0..segments {
        let j = (i + 1) % segments;
        t.push([0, 2 + j, 2 + i]);
        t.push([1, 2 + i, 2 + j]);
    }
    mesh(v, t)
}

/// Torus around the Z axis.
pub fn torus(major: f64, minor: f64, rings: u32, sides: u32) -> Mesh {
    let mut v = Vec::with_capacity((rings * sides) as usize);
    for i in 0..rings {
        let u = 2.0 * PI * i as f64 / rings as f64;
        for j in 0..sides {
            let w = 2.0 * PI * j as f64 / sides as f64;
            let r = major + minor * w.cos();
            v.push([r * u.cos(), r * u.sin(), minor * w.sin()]);
        }
    }
    let mut t = Vec::new();
    for i in 0..rings {
        for j in 0..sides {
            let a = i * sides + j;
            let b = ((i + 1) % rings) * sides + j;
            let c = ((i + 1) % rings) * sides + (j + 1) % sides;
            let d = i * sides + (j + 1) % sides;
            t.push([a, b, c]);
            t.push([a, c, d]);
        }
    }
    mesh(v, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_io::{bounding_sphere, Mesh};

    fn valid(m: &Mesh) {
        assert!(Mesh::new(m.vertices.clone(), m.triangles.clone()).is_ok());
        assert!(bounding_sphere(m).is_ok());
    }

    #[test]
    fn primitives_are_valid() {
        for name in PRIMITIVE_CLASSES {
            valid(&by_name(name).unwrap());
        }
        assert!(by_name("teapot").is_none());
    }

    #[test]
    fn icosphere_counts() {
        let s = icosphere(2);
        assert_eq!(s.triangles.len(), 20 * 16);
        assert_eq!(s.vertices.len(), 162);
        for v in &s.vertices {
            assert!((geom::norm(*v) - 1.0).abs() < 1e-12);
        }
    }
}

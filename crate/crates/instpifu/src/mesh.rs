//! Indexed triangle meshes, watertightness checking and OBJ round-trips.
//!
//! OBJ files written here contain only `v` and triangular `f` records.
//! Floats are printed with Rust's shortest round-trip formatting, so
//! write -> read -> write reproduces a file byte for byte.

use crate::geometry::{add3, cross3, dot3, mul3, norm3, scale3, sub3, V3};
use crate::{Error, Result, Scalar};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh<S: Scalar> {
    pub vertices: Vec<V3<S>>,
    pub faces: Vec<[usize; 3]>,
}

impl<S: Scalar> TriMesh<S> {
    pub fn new(vertices: Vec<V3<S>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::malformed(
                    "mesh",
                    format!("face {i} references vertex out of range (have {n})"),
                ));
            }
        }
        Ok(TriMesh { vertices, faces })
    }

    pub fn empty() -> Self {
        TriMesh {
            vertices: Vec::new(),
            faces: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Axis-aligned box with the given half-extents, centred at the origin.
    /// Faces wind counter-clockwise seen from outside.
    pub fn cuboid(hx: S, hy: S, hz: S) -> Self {
        let mut vertices = Vec::with_capacity(8);
        for &z in &[-hz, hz] {
            for &y in &[-hy, hy] {
                for &x in &[-hx, hx] {
                    vertices.push([x, y, z]);
                }
            }
        }
        // Vertex i = bit0 -> +x, bit1 -> +y, bit2 -> +z.
        let faces = vec![
            [0, 2, 1],
            [1, 2, 3], // z = -hz
            [4, 5, 6],
            [5, 7, 6], // z = +hz
            [0, 1, 4],
            [1, 5, 4], // y = -hy
            [2, 6, 3],
            [3, 6, 7], // y = +hy
            [0, 4, 2],
            [2, 4, 6], // x = -hx
            [1, 3, 5],
            [3, 7, 5], // x = +hx
        ];
        TriMesh { vertices, faces }
    }

    pub fn face_vertices(&self, i: usize) -> [V3<S>; 3] {
        let [a, b, c] = self.faces[i];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_area(&self, i: usize) -> S {
        let [a, b, c] = self.face_vertices(i);
        norm3(cross3(sub3(b, a), sub3(c, a))) * S::from_f(0.5)
    }

    pub fn area(&self) -> S {
        (0..self.faces.len()).map(|i| self.face_area(i)).sum()
    }

    /// Unnormalised face normal (cross product of the edge vectors).
    pub fn face_normal_raw(&self, i: usize) -> V3<S> {
        let [a, b, c] = self.face_vertices(i);
        cross3(sub3(b, a), sub3(c, a))
    }

    /// Volume via the divergence theorem; positive when faces wind
    /// counter-clockwise seen from outside.
    pub fn signed_volume(&self) -> S {
        let six = S::from_f(6.0);
        self.faces
            .iter()
            .map(|&[a, b, c]| {
                dot3(
                    self.vertices[a],
                    cross3(self.vertices[b], self.vertices[c]),
                ) / six
            })
            .sum()
    }

    /// AABB of the vertices; errors on a mesh with no vertices.
    pub fn bounds(&self) -> Result<(V3<S>, V3<S>)> {
        if self.vertices.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let mut lo = [S::infinity(); 3];
        let mut hi = [S::neg_infinity(); 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        Ok((lo, hi))
    }

    /// Applies a point transform to every vertex.
    pub fn map_vertices(&self, f: impl Fn(V3<S>) -> V3<S>) -> Self {
        TriMesh {
            vertices: self.vertices.iter().map(|&v| f(v)).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn translated(&self, d: V3<S>) -> Self {
        self.map_vertices(|v| add3(v, d))
    }

    pub fn scaled(&self, s: V3<S>) -> Self {
        self.map_vertices(|v| mul3(v, s))
    }

    /// Reverses every face, flipping inside and outside.
    pub fn flipped(&self) -> Self {
        TriMesh {
            vertices: self.vertices.clone(),
            faces: self.faces.iter().map(|&[a, b, c]| [a, c, b]).collect(),
        }
    }

    /// Appends another mesh, offsetting its indices.
    pub fn append(&mut self, other: &TriMesh<S>) {
        let off = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.faces
            .extend(other.faces.iter().map(|&[a, b, c]| [a + off, b + off, c + off]));
    }

    /// Checks that the mesh is a closed orientable surface: every directed
    /// edge appears exactly once and has a reversed twin, and no face is
    /// degenerate.
    pub fn check_watertight(&self) -> Result<()> {
        let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
        for (i, &[a, b, c]) in self.faces.iter().enumerate() {
            if a == b || b == c || a == c {
                return Err(Error::NotWatertight {
                    reason: format!("face {i} is degenerate"),
                });
            }
            for (u, v) in [(a, b), (b, c), (c, a)] {
                if edges.insert((u, v), i).is_some() {
                    return Err(Error::NotWatertight {
                        reason: format!("directed edge ({u}, {v}) appears twice"),
                    });
                }
            }
        }
        for &(u, v) in edges.keys() {
            if !edges.contains_key(&(v, u)) {
                return Err(Error::NotWatertight {
                    reason: format!("edge ({u}, {v}) has no oppositely wound twin"),
                });
            }
        }
        Ok(())
    }

    /// Splits into connected components (faces connected through shared
    /// vertices), in deterministic order of first face index. Vertices are
    /// compacted per component.
    pub fn split_components(&self) -> Vec<TriMesh<S>> {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &[a, b, c] in &self.faces {
            for (u, v) in [(a, b), (b, c)] {
                let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
                if ru != rv {
                    parent[ru.max(rv)] = ru.min(rv);
                }
            }
        }
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut root_to_group: HashMap<usize, usize> = HashMap::new();
        for (i, &[a, _, _]) in self.faces.iter().enumerate() {
            let root = find(&mut parent, a);
            let g = *root_to_group.entry(root).or_insert_with(|| {
                groups.push((root, Vec::new()));
                groups.len() - 1
            });
            groups[g].1.push(i);
        }
        groups
            .into_iter()
            .map(|(_, face_ids)| {
                let mut remap: HashMap<usize, usize> = HashMap::new();
                let mut vertices = Vec::new();
                let mut faces = Vec::with_capacity(face_ids.len());
                for fi in face_ids {
                    let mut out = [0usize; 3];
                    for (slot, &vi) in out.iter_mut().zip(self.faces[fi].iter()) {
                        *slot = *remap.entry(vi).or_insert_with(|| {
                            vertices.push(self.vertices[vi]);
                            vertices.len() - 1
                        });
                    }
                    faces.push(out);
                }
                TriMesh { vertices, faces }
            })
            .collect()
    }

    /// Keeps only the connected component with the largest absolute volume
    /// (ties broken by surface area, then first occurrence). Returns the
    /// mesh unchanged if it has a single component or is empty.
    pub fn largest_component(&self) -> TriMesh<S> {
        let mut comps = self.split_components();
        match comps.len() {
            0 => TriMesh::empty(),
            1 => comps.pop().unwrap(),
            _ => {
                let mut best = 0usize;
                let mut best_key = (S::neg_infinity(), S::neg_infinity());
                for (i, c) in comps.iter().enumerate() {
                    let key = (c.signed_volume().abs(), c.area());
                    if key.0 > best_key.0 || (key.0 == best_key.0 && key.1 > best_key.1) {
                        best = i;
                        best_key = key;
                    }
                }
                comps.swap_remove(best)
            }
        }
    }

    /// Recentres on the AABB centre and scales so the longest half-extent
    /// equals 1. Returns the canonical mesh with the centre and per-axis
    /// uniform scale that map canonical coordinates back to the input.
    /// The AABB centre (not a mass centroid) keeps canonical bounds
    /// symmetric around the origin.
    pub fn canonicalize(&self) -> Result<(TriMesh<S>, V3<S>, S)> {
        let (lo, hi) = self.bounds()?;
        let half = S::from_f(0.5);
        let center = scale3(add3(lo, hi), half);
        let he = scale3(sub3(hi, lo), half);
        let longest = he[0].max(he[1]).max(he[2]);
        if longest <= S::zero() {
            return Err(Error::malformed("mesh", "zero extent, cannot canonicalise"));
        }
        let inv = S::one() / longest;
        let canon = self.map_vertices(|v| scale3(sub3(v, center), inv));
        Ok((canon, center, longest))
    }

    pub fn cast<T: Scalar>(&self) -> TriMesh<T> {
        TriMesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| v.map(|x| T::from_f(x.to_f())))
                .collect(),
            faces: self.faces.clone(),
        }
    }

    /// Writes ASCII OBJ: one `v` line per vertex, one triangular `f` line
    /// per face (1-based indices).
    pub fn write_obj<W: Write>(&self, w: &mut W) -> Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for f in &self.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        Ok(())
    }

    pub fn write_obj_file(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_obj(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads the OBJ subset produced by [`TriMesh::write_obj`]. Comments and
    /// grouping metadata (`o`, `g`, `s`, `usemtl`, `mtllib`) are ignored;
    /// `f` records may use `a/b/c` forms, of which the vertex index is kept.
    /// Non-triangular faces and any other record type are malformed.
    pub fn read_obj<R: BufRead>(r: R) -> Result<Self> {
        let mut vertices: Vec<V3<S>> = Vec::new();
        let mut faces: Vec<[usize; 3]> = Vec::new();
        for (ln, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let tag = it.next().unwrap();
            let bad = |detail: String| Error::malformed("obj", format!("line {}: {detail}", ln + 1));
            match tag {
                "v" => {
                    let mut v = [S::zero(); 3];
                    for slot in v.iter_mut() {
                        let tok = it
                            .next()
                            .ok_or_else(|| bad("vertex needs 3 coordinates".into()))?;
                        let x: f64 = tok
                            .parse()
                            .map_err(|_| bad(format!("bad float {tok:?}")))?;
                        *slot = S::from_f(x);
                    }
                    if it.next().is_some() {
                        return Err(bad("vertex has more than 3 coordinates".into()));
                    }
                    vertices.push(v);
                }
                "f" => {
                    let mut f = [0usize; 3];
                    for slot in f.iter_mut() {
                        let tok = it.next().ok_or_else(|| bad("face needs 3 indices".into()))?;
                        let first = tok.split('/').next().unwrap();
                        let idx: i64 = first
                            .parse()
                            .map_err(|_| bad(format!("bad index {tok:?}")))?;
                        if idx < 1 || idx as usize > vertices.len() {
                            return Err(bad(format!("index {idx} out of range")));
                        }
                        *slot = idx as usize - 1;
                    }
                    if it.next().is_some() {
                        return Err(bad("only triangular faces are supported".into()));
                    }
                    faces.push(f);
                }
                "o" | "g" | "s" | "usemtl" | "mtllib" => {}
                other => {
                    return Err(bad(format!("unsupported record {other:?}")));
                }
            }
        }
        Ok(TriMesh { vertices, faces })
    }

    pub fn read_obj_file(path: &Path) -> Result<Self> {
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_obj(r)
    }
}

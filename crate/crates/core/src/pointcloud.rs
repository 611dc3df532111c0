//! Observed points and their conversion into the SoG data model.
//!
//! Two conversions are provided: one isotropic Gaussian per point with a
//! uniform variance, or one Gaussian per non-empty leaf of an octree that is
//! subdivided until leaves hold at most `min_points` points.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{GsogError, Result};
use crate::gaussian::{IsotropicGaussian, SoG};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(GsogError::NonFinite("point cloud"));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn parse_coords(fields: &[&str], path: &Path, line: usize) -> Result<Vector3<f64>> {
    if fields.len() < 3 {
        return Err(GsogError::parse(
            path,
            line,
            format!("expected 3 coordinates, found {}", fields.len()),
        ));
    }
    let mut v = [0.0; 3];
    for (k, tok) in fields[..3].iter().enumerate() {
        let x: f64 = tok
            .parse()
            .map_err(|_| GsogError::parse(path, line, format!("invalid number {tok:?}")))?;
        if !x.is_finite() {
            return Err(GsogError::parse(path, line, format!("non-finite value {tok:?}")));
        }
        v[k] = x;
    }
    Ok(Vector3::from(v))
}

fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(GsogError::parse(
                path,
                i + 1,
                format!("expected 3 coordinates, found {}", fields.len()),
            ));
        }
        points.push(parse_coords(&fields, path, i + 1)?);
    }
    Ok(PointCloud { points })
}

/// ASCII PLY with a vertex element whose first three properties are x, y, z.
fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(GsogError::parse(path, 1, "missing 'ply' magic")),
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props = Vec::new();
    let mut header_done = false;
    for (i, line) in lines.by_ref() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(GsogError::parse(path, i + 1, format!("unsupported PLY format {fmt}")))
            }
            ["element", "vertex", n] => {
                vertex_count = Some(
                    n.parse::<usize>()
                        .map_err(|_| GsogError::parse(path, i + 1, "invalid vertex count"))?,
                );
                in_vertex = true;
            }
            ["element", _, n] => {
                in_vertex = false;
                if *n != "0" {
                    return Err(GsogError::parse(path, i + 1, "only vertex elements are supported"));
                }
            }
            ["property", .., name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => {}
        }
    }
    if !header_done {
        return Err(GsogError::parse(path, 1, "PLY header not terminated"));
    }
    let n = vertex_count.ok_or_else(|| GsogError::parse(path, 1, "PLY has no vertex element"))?;
    if props.len() < 3 || props[0] != "x" || props[1] != "y" || props[2] != "z" {
        return Err(GsogError::parse(path, 1, "vertex properties must start with x y z"));
    }
    let mut points = Vec::with_capacity(n);
    for (i, line) in lines {
        if points.len() == n {
            break;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        points.push(parse_coords(&f, path, i + 1)?);
    }
    if points.len() != n {
        return Err(GsogError::parse(
            path,
            text.lines().count(),
            format!("expected {n} vertices, found {}", points.len()),
        ));
    }
    Ok(PointCloud { points })
}

/// Loads an XYZ text file, or an ASCII PLY file when the extension is `.ply`.
pub fn load_points(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GsogError::io(path, e))?;
    let is_ply = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) || text.starts_with("ply");
    if is_ply {
        parse_ply(&text, path)
    } else {
        parse_xyz(&text, path)
    }
}

/// Writes one `x y z` line per point with round-trip precision.
pub fn write_points(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(cloud.len() * 48);
    for p in &cloud.points {
        out.push_str(&format!("{:?} {:?} {:?}\n", p.x, p.y, p.z));
    }
    let mut file = fs::File::create(path).map_err(|e| GsogError::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| GsogError::io(path, e))
}

/// One Gaussian per point, all with variance `sigma2`.
pub fn uniform_sog(cloud: &PointCloud, sigma2: f64) -> Result<SoG> {
    if cloud.is_empty() {
        return Err(GsogError::EmptyCloud);
    }
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(GsogError::NonPositiveVariance(sigma2));
    }
    SoG::new(
        cloud
            .points
            .iter()
            .map(|p| IsotropicGaussian::new(*p, sigma2))
            .collect::<Result<_>>()?,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OctreeSettings {
    pub max_depth: usize,
    /// Nodes holding more points than this are subdivided.
    pub min_points: usize,
    /// Leaf variance is `half_extent^2 * v_scale`.
    pub v_scale: f64,
    /// Lower bound on the root half-extent, for degenerate clouds.
    pub min_half_extent: f64,
}

impl Default for OctreeSettings {
    fn default() -> Self {
        OctreeSettings {
            max_depth: 6,
            min_points: 1,
            v_scale: 1.0 / 3.0,
            min_half_extent: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OctreeNode {
    pub center: Vector3<f64>,
    pub half_extent: f64,
    pub point_count: usize,
    pub depth: usize,
    /// Empty for leaves, otherwise exactly 8 children in octant order
    /// (bit 0: +x, bit 1: +y, bit 2: +z).
    pub children: Vec<OctreeNode>,
    indices: Vec<usize>,
}

impl OctreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Indices of the points held by a leaf.
    pub fn point_indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn leaves(&self) -> Vec<&OctreeNode> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(n) = stack.pop() {
            if n.is_leaf() {
                out.push(n);
            } else {
                stack.extend(n.children.iter().rev());
            }
        }
        out
    }
}

fn octant(center: &Vector3<f64>, p: &Vector3<f64>) -> usize {
    usize::from(p.x >= center.x) | usize::from(p.y >= center.y) << 1 | usize::from(p.z >= center.z) << 2
}

fn build_node(
    points: &[Vector3<f64>],
    center: Vector3<f64>,
    half_extent: f64,
    indices: Vec<usize>,
    depth: usize,
    settings: &OctreeSettings,
) -> OctreeNode {
    let point_count = indices.len();
    if point_count <= settings.min_points || depth >= settings.max_depth {
        return OctreeNode {
            center,
            half_extent,
            point_count,
            depth,
            children: Vec::new(),
            indices,
        };
    }
    let mut buckets: [Vec<usize>; 8] = Default::default();
    for i in indices {
        buckets[octant(&center, &points[i])].push(i);
    }
    let h = 0.5 * half_extent;
    let children = buckets
        .into_iter()
        .enumerate()
        .map(|(o, idx)| {
            let sign = |bit: usize| if o & bit != 0 { h } else { -h };
            let c = center + Vector3::new(sign(1), sign(2), sign(4));
            build_node(points, c, h, idx, depth + 1, settings)
        })
        .collect();
    OctreeNode {
        center,
        half_extent,
        point_count,
        depth,
        children,
        indices: Vec::new(),
    }
}

/// Octree over the cloud's bounding box, expanded to a cube and by 1%.
pub fn build_octree(cloud: &PointCloud, settings: &OctreeSettings) -> Result<OctreeNode> {
    if cloud.is_empty() {
        return Err(GsogError::EmptyCloud);
    }
    if settings.max_depth < 1 || settings.min_points < 1 {
        return Err(GsogError::InvalidArgument(
            "octree needs max_depth >= 1 and min_points >= 1".into(),
        ));
    }
    if !(settings.v_scale > 0.0) || !(settings.min_half_extent > 0.0) {
        return Err(GsogError::InvalidArgument(
            "octree v_scale and min_half_extent must be positive".into(),
        ));
    }
    let mut lo = cloud.points[0];
    let mut hi = cloud.points[0];
    for p in &cloud.points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let center = 0.5 * (lo + hi);
    let half_extent = (0.5 * (hi - lo).max() * 1.01).max(settings.min_half_extent);
    Ok(build_node(
        &cloud.points,
        center,
        half_extent,
        (0..cloud.len()).collect(),
        0,
        settings,
    ))
}

/// One Gaussian per non-empty octree leaf, centred on the leaf centroid.
///
/// The variance is `half_extent^2 * v_scale`, raised where needed so that
/// every point of the leaf lies within three standard deviations of the
/// centroid.
pub fn octree_sog(cloud: &PointCloud, settings: &OctreeSettings) -> Result<SoG> {
    let root = build_octree(cloud, settings)?;
    let mut components = Vec::new();
    for leaf in root.leaves() {
        if leaf.point_count == 0 {
            continue;
        }
        let idx = leaf.point_indices();
        let centroid = idx.iter().map(|&i| cloud.points[i]).sum::<Vector3<f64>>() / idx.len() as f64;
        let spread = idx
            .iter()
            .map(|&i| (cloud.points[i] - centroid).norm_squared())
            .fold(0.0, f64::max);
        let variance = (leaf.half_extent.powi(2) * settings.v_scale).max(spread / 9.0);
        components.push(IsotropicGaussian::new(centroid, variance)?);
    }
    SoG::new(components)
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Row-major depth image in meters; zero marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(GsogError::LengthMismatch(format!(
                "depth image {width}x{height} needs {} values, got {}",
                width * height,
                depth.len()
            )));
        }
        Ok(DepthImage { width, height, depth })
    }
}

/// Reads a 16-bit grayscale image holding depth in millimetres.
pub fn load_depth_image(path: impl AsRef<Path>) -> Result<DepthImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => GsogError::io(path, io),
        other => GsogError::parse(path, 0, other.to_string()),
    })?;
    let gray = img.to_luma16();
    let (w, h) = gray.dimensions();
    let depth = gray.pixels().map(|p| f64::from(p.0[0]) * 1e-3).collect();
    DepthImage::new(w as usize, h as usize, depth)
}

/// Back-projects valid pixels: `x = (u - cx) z / fx`, `y = (v - cy) z / fy`.
pub fn depth_to_points(image: &DepthImage, intrinsics: &Intrinsics) -> Result<PointCloud> {
    let Intrinsics { fx, fy, cx, cy } = *intrinsics;
    if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
        return Err(GsogError::InvalidArgument("focal lengths must be positive".into()));
    }
    if image.depth.len() != image.width * image.height {
        return Err(GsogError::LengthMismatch(
            "depth buffer does not match image size".into(),
        ));
    }
    let mut points = Vec::new();
    for v in 0..image.height {
        for u in 0..image.width {
            let z = image.depth[v * image.width + u];
            if z > 0.0 && z.is_finite() {
                points.push(Vector3::new((u as f64 - cx) * z / fx, (v as f64 - cy) * z / fy, z));
            }
        }
    }
    if points.is_empty() {
        log::warn!("depth image has no valid pixels");
    }
    Ok(PointCloud { points })
}

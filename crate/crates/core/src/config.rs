//! JSON template configuration.
//!
//! A config holds the skeleton, the Gaussians attached to it (authored as
//! ellipsoids: centre, semi-axes as standard deviations and an orientation
//! quaternion in `[x, y, z, w]` order), optimizer settings, the point cloud
//! conversion, optional marker assignments and optional camera intrinsics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{GsogError, Result};
use crate::gaussian::{AnisotropicGaussian, IsotropicGaussian, Precision, SoG};
use crate::kinematics::{Attachment, GSoGTemplate, Joint, Skeleton};
use crate::optimizer::OptimizerSettings;
use crate::pointcloud::{octree_sog, uniform_sog, Intrinsics, OctreeSettings, PointCloud};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    /// Must equal the joint's position in the list.
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// `None` only for the root, which must be joint 0.
    pub parent: Option<usize>,
    /// Joint origin in the parent's frame; the root offset is applied after
    /// the global translation.
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttachmentConfig {
    pub joint: usize,
    /// Centre in the joint's local frame.
    pub center: [f64; 3],
    /// Standard deviations along the ellipsoid's principal axes.
    pub semi_axes: [f64; 3],
    #[serde(default = "identity_orientation")]
    pub orientation: [f64; 4],
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn identity_orientation() -> [f64; 4] {
    [0.0, 0.0, 0.0, 1.0]
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConversion {
    Uniform {
        sigma2: f64,
    },
    Octree {
        max_depth: usize,
        min_points: usize,
        #[serde(default = "default_v_scale")]
        v_scale: f64,
        #[serde(default = "default_min_half_extent")]
        min_half_extent: f64,
        /// Lower bound applied to every component variance.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma2_floor: Option<f64>,
    },
}

fn default_v_scale() -> f64 {
    OctreeSettings::default().v_scale
}

fn default_min_half_extent() -> f64 {
    OctreeSettings::default().min_half_extent
}

impl DataConversion {
    pub fn convert(&self, cloud: &PointCloud) -> Result<SoG> {
        match self {
            DataConversion::Uniform { sigma2 } => uniform_sog(cloud, *sigma2),
            DataConversion::Octree {
                max_depth,
                min_points,
                v_scale,
                min_half_extent,
                sigma2_floor,
            } => {
                let settings = OctreeSettings {
                    max_depth: *max_depth,
                    min_points: *min_points,
                    v_scale: *v_scale,
                    min_half_extent: *min_half_extent,
                };
                let sog = octree_sog(cloud, &settings)?;
                match sigma2_floor {
                    None => Ok(sog),
                    Some(floor) => SoG::new(
                        sog.components()
                            .iter()
                            .map(|g| IsotropicGaussian::new(*g.mean(), g.variance().max(*floor)))
                            .collect::<Result<_>>()?,
                    ),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerAssignment {
    pub id: String,
    pub joint: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateConfig {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub joints: Vec<JointConfig>,
    pub attachments: Vec<AttachmentConfig>,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    pub data: DataConversion,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub markers: Vec<MarkerAssignment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<Intrinsics>,
}

fn invalid(msg: impl Into<String>) -> GsogError {
    GsogError::InvalidTemplate(msg.into())
}

impl TemplateConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TemplateConfig = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GsogError::io(path, e))?;
        let cfg: TemplateConfig =
            serde_json::from_str(&text).map_err(|e| GsogError::parse(path, e.line(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| GsogError::io(path, e))
    }

    /// Checks version, ids and settings, and that the template builds.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(invalid(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if j.id != i {
                return Err(invalid(format!("joint at position {i} has id {}", j.id)));
            }
        }
        for m in &self.markers {
            if m.joint >= self.joints.len() {
                return Err(invalid(format!("marker {} references missing joint {}", m.id, m.joint)));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.markers.iter().find(|m| !seen.insert(&m.id)) {
            return Err(invalid(format!("duplicate marker id {}", dup.id)));
        }
        self.optimizer.validate()?;
        if let DataConversion::Uniform { sigma2 } = self.data {
            if !(sigma2 > 0.0) || !sigma2.is_finite() {
                return Err(GsogError::NonPositiveVariance(sigma2));
            }
        }
        self.template().map(|_| ())
    }

    pub fn skeleton(&self) -> Result<Skeleton> {
        Skeleton::new(
            self.joints
                .iter()
                .map(|j| {
                    let mut joint = match j.parent {
                        None => Joint::root(Vector3::from(j.offset)),
                        Some(p) => Joint::child(p, Vector3::from(j.offset)),
                    };
                    if let Some(name) = &j.name {
                        joint = joint.named(name.clone());
                    }
                    joint
                })
                .collect(),
        )
    }

    pub fn template(&self) -> Result<GSoGTemplate> {
        let skeleton = self.skeleton()?;
        let attachments = self
            .attachments
            .iter()
            .enumerate()
            .map(|(k, a)| {
                if a.joint >= skeleton.len() {
                    return Err(invalid(format!("attachment {k} references missing joint {}", a.joint)));
                }
                if a.semi_axes.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                    return Err(invalid(format!("attachment {k} has non-positive semi-axes")));
                }
                let [x, y, z, w] = a.orientation;
                let q = Quaternion::new(w, x, y, z);
                if !(q.norm() > 0.0) || !q.norm().is_finite() {
                    return Err(GsogError::ZeroQuaternion { joint: a.joint });
                }
                let precision = Precision::from_axes(&Vector3::from(a.semi_axes), &UnitQuaternion::from_quaternion(q))?;
                Ok(Attachment {
                    joint: a.joint,
                    gaussian: AnisotropicGaussian::with_weight(Vector3::from(a.center), precision, a.weight)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        GSoGTemplate::new(skeleton, attachments)
    }

    /// Marker id to joint index.
    pub fn marker_assignments(&self) -> BTreeMap<String, usize> {
        self.markers.iter().map(|m| (m.id.clone(), m.joint)).collect()
    }

    /// True when every attachment is a sphere, i.e. the template is a plain SoG.
    pub fn is_isotropic(&self) -> bool {
        self.attachments
            .iter()
            .all(|a| a.semi_axes.iter().all(|s| *s == a.semi_axes[0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "format_version": 1,
        "joints": [
            {"id": 0, "name": "root", "parent": null, "offset": [0, 0, 0]},
            {"id": 1, "parent": 0, "offset": [0, 0.5, 0]}
        ],
        "attachments": [
            {"joint": 0, "center": [0, 0.2, 0], "semi_axes": [0.1, 0.2, 0.1]},
            {"joint": 1, "center": [0, 0.2, 0], "semi_axes": [0.05, 0.2, 0.05], "orientation": [0, 0, 0.3826834323650898, 0.9238795325112867]}
        ],
        "data": {"mode": "uniform", "sigma2": 0.0004},
        "markers": [{"id": "tip", "joint": 1}]
    }"#;

    #[test]
    fn parses_and_builds() {
        let cfg = TemplateConfig::from_json(MINIMAL).unwrap();
        let t = cfg.template().unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.skeleton().parameter_count(), 11);
        assert_eq!(t.skeleton().find("root"), Some(0));
        assert_eq!(cfg.optimizer, OptimizerSettings::default());
        assert_eq!(cfg.marker_assignments().get("tip"), Some(&1));
        assert!(!cfg.is_isotropic());
    }

    #[test]
    fn round_trip() {
        let cfg = TemplateConfig::from_json(MINIMAL).unwrap();
        let again = TemplateConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.template().unwrap(), again.template().unwrap());
    }

    #[test]
    fn octree_mode() {
        let text = MINIMAL.replace(
            r#"{"mode": "uniform", "sigma2": 0.0004}"#,
            r#"{"mode": "octree", "max_depth": 3, "min_points": 2, "sigma2_floor": 0.0001}"#,
        );
        let cfg = TemplateConfig::from_json(&text).unwrap();
        match cfg.data {
            DataConversion::Octree {
                max_depth,
                v_scale,
                sigma2_floor,
                ..
            } => {
                assert_eq!(max_depth, 3);
                assert_eq!(v_scale, 1.0 / 3.0);
                assert_eq!(sigma2_floor, Some(0.0001));
            }
            _ => panic!("wrong mode"),
        }
        assert_eq!(TemplateConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            ("\"format_version\": 1", "\"format_version\": 2"),
            ("{\"id\": 1, \"parent\": 0", "{\"id\": 5, \"parent\": 0"),
            ("\"parent\": 0", "\"parent\": 3"),
            ("[0.1, 0.2, 0.1]", "[0.1, 0.0, 0.1]"),
            ("\"sigma2\": 0.0004", "\"sigma2\": -1"),
            ("{\"id\": \"tip\", \"joint\": 1}", "{\"id\": \"tip\", \"joint\": 9}"),
            (
                "\"orientation\": [0, 0, 0.3826834323650898, 0.9238795325112867]",
                "\"orientation\": [0, 0, 0, 0]",
            ),
            ("\"data\"", "\"bogus\": 1, \"data\""),
        ];
        for (from, to) in cases {
            let text = MINIMAL.replacen(from, to, 1);
            assert_ne!(text, MINIMAL, "{from}");
            assert!(TemplateConfig::from_json(&text).is_err(), "{to}");
        }
    }

    #[test]
    fn load_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, "{\n  \"format_version\": 1,\n  oops\n}").unwrap();
        assert!(matches!(
            TemplateConfig::load(&p),
            Err(GsogError::Parse { line: 3, .. })
        ));
        assert!(matches!(
            TemplateConfig::load(dir.path().join("none.json")),
            Err(GsogError::Io { .. })
        ));
    }
}

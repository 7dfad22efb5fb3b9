//! Run configuration, read from TOML. Every field has a default, so an empty
//! file describes the reference experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingSphere, Vec3};
use crate::scene::{Primitive, Scene, Shape, Split, TrajectorySpec};
use crate::training::{ClassifierConfig, DistanceConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub scene: SceneConfig,
    pub render: RenderConfig,
    /// Camera poses; the catalog default for the scene when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<TrajectorySpec>,
    pub data: DataConfig,
    pub classifier: ClassifierConfig,
    pub distance: DistanceConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("raydf-run"),
            scene: SceneConfig::default(),
            render: RenderConfig::default(),
            trajectory: None,
            data: DataConfig::default(),
            classifier: ClassifierConfig::default(),
            distance: DistanceConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Catalog scene name; ignored when `primitives` is nonempty.
    pub name: String,
    /// Bounding sphere diameter, meters.
    pub diameter: f64,
    pub center: [f64; 3],
    pub primitives: Vec<PrimitiveSpec>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            name: "sphere".into(),
            diameter: 3.0,
            center: [0.0; 3],
            primitives: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PrimitiveSpec {
    Sphere {
        center: [f64; 3],
        radius: f64,
        #[serde(default = "default_color")]
        color: [f32; 3],
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
        #[serde(default = "default_color")]
        color: [f32; 3],
    },
    Plane {
        normal: [f64; 3],
        offset: f64,
        extent: f64,
        #[serde(default = "default_color")]
        color: [f32; 3],
    },
}

fn default_color() -> [f32; 3] {
    [0.7, 0.7, 0.7]
}

impl PrimitiveSpec {
    fn to_primitive(&self) -> Primitive {
        match *self {
            PrimitiveSpec::Sphere { center, radius, color } => Primitive {
                shape: Shape::Sphere {
                    center: Vec3::from(center),
                    radius,
                },
                color,
            },
            PrimitiveSpec::Box { min, max, color } => Primitive {
                shape: Shape::Box {
                    min: Vec3::from(min),
                    max: Vec3::from(max),
                },
                color,
            },
            PrimitiveSpec::Plane {
                normal,
                offset,
                extent,
                color,
            } => Primitive {
                shape: Shape::Plane {
                    normal: Vec3::from(normal),
                    offset,
                    extent,
                },
                color,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Scan resolution.
    pub width: u32,
    pub height: u32,
    /// Resolution of the scans used to build visibility pairs; the scan
    /// resolution when zero.
    pub pair_resolution: u32,
    /// Standard deviation of Gaussian depth noise, meters.
    pub depth_noise: f64,
    pub color: bool,
    /// Resolution used by `render`; the scan resolution when zero.
    pub output_width: u32,
    pub output_height: u32,
    /// Which trajectory split `render` draws poses from.
    pub split: Split,
    /// Render at most this many views; all when zero.
    pub max_views: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            pair_resolution: 0,
            depth_noise: 0.0,
            color: false,
            output_width: 0,
            output_height: 0,
            split: Split::Test,
            max_views: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Fraction of valid pixels kept per scan.
    pub sparsity: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { sparsity: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub outlier_threshold: f64,
    /// Points per set for the chamfer distance.
    pub chamfer_points: usize,
    /// Pair budget for classifier metrics on the test views.
    pub pair_budget: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            outlier_threshold: crate::eval::DEFAULT_OUTLIER_THRESHOLD,
            chamfer_points: 10_000,
            pair_budget: 20_000,
        }
    }
}

/// Named sub-seed salts derived from the global seed.
pub mod seeds {
    pub const DATA: u64 = 101;
    pub const PAIRS: u64 = 102;
    pub const CLASSIFIER: u64 = 103;
    pub const DISTANCE: u64 = 104;
    pub const EVAL: u64 = 105;
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        self.distance.validate()?;
        if self.render.width == 0 || self.render.height == 0 {
            return Err(Error::Config("render resolution must be positive".into()));
        }
        if !(self.data.sparsity > 0.0 && self.data.sparsity <= 1.0) {
            return Err(Error::Config(format!("data.sparsity must lie in (0, 1], got {}", self.data.sparsity)));
        }
        if !(self.render.depth_noise >= 0.0) {
            return Err(Error::Config("render.depth_noise must be non-negative".into()));
        }
        if !(self.eval.outlier_threshold > 0.0) {
            return Err(Error::Config("eval.outlier_threshold must be positive".into()));
        }
        if self.eval.chamfer_points == 0 {
            return Err(Error::Config("eval.chamfer_points must be positive".into()));
        }
        self.scene()?;
        Ok(())
    }

    pub fn bounding(&self) -> Result<BoundingSphere> {
        BoundingSphere::new(Vec3::from(self.scene.center), self.scene.diameter)
    }

    pub fn scene(&self) -> Result<Scene> {
        let bounding = self.bounding()?;
        if self.scene.primitives.is_empty() {
            let catalog = Scene::catalog(&self.scene.name, self.scene.diameter)?;
            let offset = bounding.center;
            Ok(if offset == Vec3::zeros() {
                catalog
            } else {
                let moved = catalog.transformed(&nalgebra::Matrix3::identity(), &offset);
                Scene::new(moved.primitives, bounding)?
            })
        } else {
            Scene::new(self.scene.primitives.iter().map(PrimitiveSpec::to_primitive).collect(), bounding)
        }
    }

    pub fn pair_resolution(&self) -> (u32, u32) {
        match self.render.pair_resolution {
            0 => (self.render.width, self.render.height),
            r => (r, r * self.render.height / self.render.width.max(1)),
        }
    }

    pub fn output_resolution(&self) -> (u32, u32) {
        match (self.render.output_width, self.render.output_height) {
            (0, _) | (_, 0) => (self.render.width, self.render.height),
            (w, h) => (w, h),
        }
    }

    pub fn trajectory_spec(&self) -> TrajectorySpec {
        match &self.trajectory {
            Some(t) => t.clone(),
            None if self.scene.primitives.is_empty() => TrajectorySpec::for_scene(&self.scene.name),
            None => TrajectorySpec::default(),
        }
    }

    /// Stage configs with seeds derived from the global seed.
    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            seed: crate::dataset::sub_seed(self.seed, seeds::CLASSIFIER),
            ..self.classifier.clone()
        }
    }

    pub fn distance_config(&self) -> DistanceConfig {
        DistanceConfig {
            seed: crate::dataset::sub_seed(self.seed, seeds::DISTANCE),
            ..self.distance.clone()
        }
    }
}

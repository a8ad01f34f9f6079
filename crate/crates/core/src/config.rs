//! Pipeline parameters and the flat `key = value` config file format.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scene::Category;

/// Which features feed the appearance models and whether seed pixels are
/// pinned to their cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureConfig {
    Rgb,
    RgbHc,
    Rgbxyz,
    RgbxyzHc,
}

impl FeatureConfig {
    pub const ALL: [FeatureConfig; 4] = [
        FeatureConfig::Rgb,
        FeatureConfig::RgbHc,
        FeatureConfig::Rgbxyz,
        FeatureConfig::RgbxyzHc,
    ];

    pub fn uses_xyz(self) -> bool {
        matches!(self, FeatureConfig::Rgbxyz | FeatureConfig::RgbxyzHc)
    }

    pub fn hard_constraints(self) -> bool {
        matches!(self, FeatureConfig::RgbHc | FeatureConfig::RgbxyzHc)
    }

    /// Appearance-model dimension for ground and object models.
    pub fn dim(self) -> usize {
        if self.uses_xyz() {
            6
        } else {
            3
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FeatureConfig::Rgb => "RGB",
            FeatureConfig::RgbHc => "RGB_HC",
            FeatureConfig::Rgbxyz => "RGBXYZ",
            FeatureConfig::RgbxyzHc => "RGBXYZ_HC",
        }
    }
}

impl fmt::Display for FeatureConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label().to_ascii_lowercase())
    }
}

impl serde::Serialize for FeatureConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl FromStr for FeatureConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeatureConfig::ALL
            .into_iter()
            .find(|c| c.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown feature config `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InferenceMode {
    Separated,
    Holistic,
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceMode::Separated => "separated",
            InferenceMode::Holistic => "holistic",
        })
    }
}

impl serde::Serialize for InferenceMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl FromStr for InferenceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "separated" => Ok(InferenceMode::Separated),
            "holistic" => Ok(InferenceMode::Holistic),
            _ => Err(format!("unknown inference mode `{s}`")),
        }
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! display_fromstr_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.trim().parse::<$t>().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_fromstr_value!(f64, usize, u64, bool, FeatureConfig, InferenceMode);

impl ConfigValue for Vec<Category> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| Category::from_name(t).ok_or_else(|| format!("unknown category `{t}`")))
            .collect()
    }

    fn render(&self) -> String {
        self.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! pipeline_config {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr, )*) => {
        /// Every tunable of the pipeline. Defaults come from [`PipelineConfig::default`].
        #[derive(Debug, Clone, PartialEq)]
        pub struct PipelineConfig {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for PipelineConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl PipelineConfig {
            /// Keys accepted in config files, in file order.
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field), )*];

            fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value)?;
                        Ok(())
                    } )*
                    _ => Err(format!("unknown key `{key}`")),
                }
            }

            /// Renders the config as `key = value` lines.
            pub fn to_kv_string(&self) -> String {
                let mut out = String::new();
                $( out.push_str(&format!("{} = {}\n", stringify!($field),
                    ConfigValue::render(&self.$field))); )*
                out
            }
        }
    };
}

pipeline_config! {
    /// Weight of the object unary term.
    lambda1: f64 = 0.5,
    /// Weight of the category unary term.
    lambda2: f64 = 1.0,
    /// Weight of object-label smoothness.
    lambda3: f64 = 10.0,
    /// Weight of category-label smoothness.
    lambda4: f64 = 10.0,
    /// Weight of object/category agreement.
    lambda5: f64 = 10.0,
    /// Hard-constraint cost of a seed on its own cluster label.
    alpha_o: f64 = 1.0,
    /// Hard-constraint cost of a seed on any other label.
    beta_o: f64 = 500.0,
    /// Cap on the category unary.
    alpha_c: f64 = 50.0,
    /// Bandwidth of the contrast-sensitive smoothness kernel.
    sigma: f64 = 625.0,
    /// Maximum cuboid bottom height (m above ground) for ground-bound classes.
    t_h: f64 = 0.5,
    gmm_components: usize = 5,
    /// Covariance regularizer added as `epsilon * I` in feature units.
    gmm_epsilon: f64 = 1e-3,
    gmm_max_iterations: usize = 200,
    /// EM stops when the mean per-sample log-likelihood gain drops below this.
    gmm_tolerance: f64 = 1e-5,
    ransac_threshold: f64 = 0.15,
    ransac_iterations: usize = 500,
    /// Height gate for ground candidates, meters below the sensor.
    height_gate_min: f64 = 1.23,
    height_gate_max: f64 = 2.23,
    cluster_tolerance: f64 = 0.5,
    cluster_min_size: usize = 30,
    /// Clusters whose centroid lies beyond this range need `far_min_size` points.
    far_range: f64 = 40.0,
    far_min_size: usize = 100,
    upsample_sigma_s: f64 = 6.0,
    upsample_sigma_r: f64 = 20.0,
    features: FeatureConfig = FeatureConfig::RgbxyzHc,
    mode: InferenceMode = InferenceMode::Holistic,
    /// Master seed for every random choice in the pipeline.
    seed: u64 = 7,
    max_sweeps: usize = 20,
    /// Background group of categories (ungated classifier scores).
    background_categories: Vec<Category> = vec![Category::Roadside],
    patch_masked: bool = true,
    patch_depth: bool = true,
    /// Seed-support dilation radius for patch masks, pixels.
    mask_dilation: usize = 3,
    pretrain_crops: usize = 4000,
    kmeans_iterations: usize = 25,
    softmax_learning_rate: f64 = 0.5,
    softmax_epochs: usize = 300,
    softmax_batch: usize = 32,
    softmax_l2: f64 = 1e-4,
    train_fraction: f64 = 0.7,
    workers: usize = 1,
}

impl PipelineConfig {
    /// Returns every violated invariant; empty when the config is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        let scales = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.alpha_o,
            self.beta_o,
            self.alpha_c,
        ];
        if scales.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            errors.push("nonnegative scales: lambda1..lambda5, alpha_o, beta_o, alpha_c must be >= 0".into());
        }
        if !(self.beta_o > self.alpha_o) {
            errors.push("β_o > α_o: beta_o must exceed alpha_o".into());
        }
        if !(self.sigma > 0.0) {
            errors.push("sigma must be positive".into());
        }
        if self.gmm_components < 1 {
            errors.push("gmm_components must be >= 1".into());
        }
        if !(self.gmm_epsilon > 0.0) {
            errors.push("gmm_epsilon must be positive".into());
        }
        if !(self.ransac_threshold > 0.0) || self.ransac_iterations == 0 {
            errors.push("ransac threshold and iterations must be positive".into());
        }
        if !(self.height_gate_min < self.height_gate_max) {
            errors.push("height gate must satisfy height_gate_min < height_gate_max".into());
        }
        if !(self.cluster_tolerance > 0.0) {
            errors.push("cluster_tolerance must be positive".into());
        }
        if !(self.upsample_sigma_s > 0.0 && self.upsample_sigma_r > 0.0) {
            errors.push("upsampling bandwidths must be positive".into());
        }
        if self
            .background_categories
            .iter()
            .any(|c| c.recognized_index().is_none())
        {
            errors.push("background categories must be classifier categories".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            errors.push("train_fraction must lie in (0, 1)".into());
        }
        if self.max_sweeps == 0 {
            errors.push("max_sweeps must be >= 1".into());
        }
        errors
    }

    pub fn validated(self) -> Result<Self> {
        let errors = self.validate();
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidConfig(errors))
        }
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are ignored;
    /// unset keys keep their defaults and unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = PipelineConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigParse {
                line: n + 1,
                message: "expected `key = value`".into(),
            })?;
            config
                .set(key.trim(), value)
                .map_err(|message| Error::ConfigParse {
                    line: n + 1,
                    message,
                })?;
        }
        Ok(config)
    }

    /// Stable 64-bit hash of the rendered config (FNV-1a), for cache keys.
    pub fn fingerprint(&self) -> u64 {
        self.to_kv_string().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    /// Derives an independent seed for a named stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        stage.bytes().fold(self.seed ^ 0x9e37_79b9_7f4a_7c15, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

/// The default parameters.
pub fn default_config() -> PipelineConfig {
    PipelineConfig::default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_match_published_values() {
        let c = default_config();
        assert_eq!(c.lambda1, 0.5);
        assert_eq!(c.lambda2, 1.0);
        assert_eq!((c.lambda3, c.lambda4, c.lambda5), (10.0, 10.0, 10.0));
        assert_eq!(c.alpha_o, 1.0);
        assert_eq!(c.beta_o, 500.0);
        assert_eq!(c.alpha_c, 50.0);
        assert_eq!(c.sigma, 625.0);
        assert_eq!(c.gmm_components, 5);
        assert!(c.validate().is_empty());
    }

    #[test]
    fn validation_reports_each_violation() {
        let c = PipelineConfig {
            beta_o: 0.0,
            alpha_o: 1.0,
            ..default_config()
        };
        let errs = c.validate();
        assert!(errs.iter().any(|e| e.contains("β_o > α_o")), "{errs:?}");

        let c = PipelineConfig {
            lambda3: -1.0,
            ..default_config()
        };
        let errs = c.validate();
        assert!(errs.iter().any(|e| e.contains("nonnegative scales")), "{errs:?}");

        let c = PipelineConfig {
            lambda3: -1.0,
            gmm_components: 0,
            ..default_config()
        };
        assert_eq!(c.validate().len(), 2);
    }

    #[test]
    fn parse_rejects_unknown_keys_and_keeps_defaults() {
        let c = PipelineConfig::parse("# ablation\nlambda5 = 0\nfeatures = rgb_hc\n\n").unwrap();
        assert_eq!(c.lambda5, 0.0);
        assert_eq!(c.features, FeatureConfig::RgbHc);
        assert_eq!(c.beta_o, 500.0);

        let err = PipelineConfig::parse("lambda9 = 1").unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 1, .. }));
        assert!(PipelineConfig::parse("lambda1 1").is_err());
        assert!(PipelineConfig::parse("mode = joint").is_err());
    }

    #[test]
    fn every_key_is_rendered() {
        let text = default_config().to_kv_string();
        assert_eq!(text.lines().count(), PipelineConfig::KEYS.len());
    }

    fn arb_config() -> impl Strategy<Value = PipelineConfig> {
        (
            prop::array::uniform5(-1e6f64..1e6),
            (0.0f64..10.0, 10.0f64..1e4, any::<f64>().prop_filter("finite", |v| v.is_finite())),
            (1usize..12, any::<u64>(), prop::sample::select(FeatureConfig::ALL.to_vec())),
            (any::<bool>(), prop::sample::subsequence(Category::RECOGNIZED.to_vec(), 0..4)),
        )
            .prop_map(|(l, (a, b, s), (k, seed, feat), (mode, bg))| PipelineConfig {
                lambda1: l[0],
                lambda2: l[1],
                lambda3: l[2],
                lambda4: l[3],
                lambda5: l[4],
                alpha_o: a,
                beta_o: b,
                sigma: s,
                gmm_components: k,
                seed,
                features: feat,
                mode: if mode {
                    InferenceMode::Holistic
                } else {
                    InferenceMode::Separated
                },
                background_categories: bg,
                ..default_config()
            })
    }

    proptest! {
        #[test]
        fn serialization_round_trips(c in arb_config()) {
            let parsed = PipelineConfig::parse(&c.to_kv_string()).unwrap();
            prop_assert_eq!(parsed, c);
        }
    }
}

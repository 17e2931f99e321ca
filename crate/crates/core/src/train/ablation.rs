use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::loss::{LossConfig, LossTerm};
use crate::mapper::{MapperConfig, StageMode};

/// One of the three mapper stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Conv,
    Time,
    Head,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Conv, Stage::Time, Stage::Head];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Conv => "conv",
            Stage::Time => "time",
            Stage::Head => "head",
        }
    }
}

/// What to change relative to the full model before training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum AblationSpec {
    #[default]
    Full,
    /// Drop one loss term (its coefficient becomes 0).
    LossLoo { term: LossTerm },
    /// Replace one stage by its stand-in.
    ComponentLoo { stage: Stage },
    /// One run per value of a single coefficient.
    CoeffSweep { term: LossTerm, values: Vec<f64> },
}

/// A fully resolved training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub mapper: MapperConfig,
    pub loss: LossConfig,
}

impl AblationSpec {
    /// The full model followed by every single-term loss ablation.
    pub fn loss_loo_suite() -> Vec<AblationSpec> {
        std::iter::once(AblationSpec::Full)
            .chain(LossTerm::ALL.map(|term| AblationSpec::LossLoo { term }))
            .collect()
    }

    /// The full model followed by every single-stage ablation.
    pub fn component_loo_suite() -> Vec<AblationSpec> {
        std::iter::once(AblationSpec::Full)
            .chain(Stage::ALL.map(|stage| AblationSpec::ComponentLoo { stage }))
            .collect()
    }

    /// Applies this ablation to base configurations. Every mode except a sweep
    /// yields exactly one variant.
    pub fn variants(
        &self,
        mapper: &MapperConfig,
        loss: &LossConfig,
    ) -> Result<Vec<Variant>, TrainError> {
        let variant = |label: String, mapper: MapperConfig, loss: LossConfig| Variant {
            label,
            mapper,
            loss,
        };
        Ok(match self {
            AblationSpec::Full => vec![variant("full".into(), mapper.clone(), loss.clone())],
            AblationSpec::LossLoo { term } => {
                let mut l = loss.clone();
                l.set_lambda(*term, 0.0);
                vec![variant(format!("w/o {}", term.name()), mapper.clone(), l)]
            }
            AblationSpec::ComponentLoo { stage } => {
                let mut m = mapper.clone();
                let slot = match stage {
                    Stage::Conv => &mut m.stage_modes.conv,
                    Stage::Time => &mut m.stage_modes.time,
                    Stage::Head => &mut m.stage_modes.head,
                };
                *slot = StageMode::Disabled;
                vec![variant(format!("w/o {}", stage.name()), m, loss.clone())]
            }
            AblationSpec::CoeffSweep { term, values } => {
                if values.is_empty() {
                    return Err(TrainError::Config(
                        "coefficient sweep without values".into(),
                    ));
                }
                values
                    .iter()
                    .map(|&v| {
                        let mut l = loss.clone();
                        l.set_lambda(*term, v);
                        variant(format!("{}={v}", term.name()), mapper.clone(), l)
                    })
                    .collect()
            }
        })
    }
}

//! Stable identifiers for every learnable tensor.

use std::fmt;

/// Which mixture-of-experts module inside a block's pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    Shared,
    Domain(usize),
}

/// A tensor inside one mixture-of-experts module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExpertSlot {
    RouterWeight,
    RouterBias,
    Down(usize),
    Up(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttnPart {
    Query,
    Key,
    Value,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    PatchWeight,
    PatchBias,
    ClassToken,
    Positions,
    Attn { block: usize, head: usize, part: AttnPart },
    AttnOutBias { block: usize },
    NormGain { block: usize, site: usize },
    NormBias { block: usize, site: usize },
    FfnIn { block: usize },
    FfnInBias { block: usize },
    FfnOut { block: usize },
    FfnOutBias { block: usize },
    FinalGain,
    FinalBias,
    HeadWeight,
    HeadBias,
    Expert { block: usize, branch: Branch, slot: ExpertSlot },
}

impl ParamKey {
    pub fn is_expert(&self) -> bool {
        matches!(self, ParamKey::Expert { .. })
    }

    pub fn branch(&self) -> Option<(usize, Branch)> {
        match *self {
            ParamKey::Expert { block, branch, .. } => Some((block, branch)),
            _ => None,
        }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamKey::Expert { block, branch, slot } => {
                let b = match branch {
                    Branch::Shared => "shared".to_string(),
                    Branch::Domain(i) => format!("domain{i}"),
                };
                let s = match slot {
                    ExpertSlot::RouterWeight => "router.weight".to_string(),
                    ExpertSlot::RouterBias => "router.bias".to_string(),
                    ExpertSlot::Down(e) => format!("expert{e}.down"),
                    ExpertSlot::Up(e) => format!("expert{e}.up"),
                };
                write!(f, "block{block}.{b}.{s}")
            }
            other => write!(f, "{other:?}"),
        }
    }
}

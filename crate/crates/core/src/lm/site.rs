use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// A named point in the residual computation of block `k`.
///
/// Within a block: `ResidPre` feeds attention, `FfBlockIn` is the residual
/// after attention, `FfLayerIn` is its DyT normalization, `FfLayerOut` is the
/// MLP output, and `FfBlockOut` / `ResidPost` are both the residual after
/// the MLP. `ResidPost(k)` and `ResidPre(k + 1)` hold the same vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    ResidPre(usize),
    FfBlockIn(usize),
    FfLayerIn(usize),
    FfLayerOut(usize),
    FfBlockOut(usize),
    ResidPost(usize),
}

impl Site {
    pub fn layer(self) -> usize {
        match self {
            Site::ResidPre(k)
            | Site::FfBlockIn(k)
            | Site::FfLayerIn(k)
            | Site::FfLayerOut(k)
            | Site::FfBlockOut(k)
            | Site::ResidPost(k) => k,
        }
    }

    fn kind(self) -> &'static str {
        match self {
            Site::ResidPre(_) => "resid_pre",
            Site::FfBlockIn(_) => "ff_block_in",
            Site::FfLayerIn(_) => "ff_layer_in",
            Site::FfLayerOut(_) => "ff_layer_out",
            Site::FfBlockOut(_) => "ff_block_out",
            Site::ResidPost(_) => "resid_post",
        }
    }

    /// Position of the site within its block's forward order.
    pub(crate) fn stage(self) -> usize {
        match self {
            Site::ResidPre(_) => 0,
            Site::FfBlockIn(_) => 1,
            Site::FfLayerIn(_) => 2,
            Site::FfLayerOut(_) => 3,
            Site::FfBlockOut(_) => 4,
            Site::ResidPost(_) => 5,
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.kind(), self.layer())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let (kind, k) = s.rsplit_once('.').ok_or_else(|| Error::UnknownSite(s.into()))?;
        let k: usize = k.parse().map_err(|_| Error::UnknownSite(s.into()))?;
        Ok(match kind {
            "resid_pre" => Site::ResidPre(k),
            "ff_block_in" => Site::FfBlockIn(k),
            "ff_layer_in" => Site::FfLayerIn(k),
            "ff_layer_out" => Site::FfLayerOut(k),
            "ff_block_out" => Site::FfBlockOut(k),
            "resid_post" => Site::ResidPost(k),
            _ => return Err(Error::UnknownSite(s.into())),
        })
    }
}

impl Serialize for Site {
    fn serialize<Z: Serializer>(&self, s: Z) -> Result<Z::Ok, Z::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Site {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

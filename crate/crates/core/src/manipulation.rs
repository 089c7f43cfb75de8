//! Table manipulations used as negative controls.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explanation::{Sign, TruncatedTable};

const MAX_PERMUTATION_DRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipulationKind {
    InvertFlip,
    RandomPermutation,
}

impl fmt::Display for ManipulationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ManipulationKind::InvertFlip => "invert_flip",
            ManipulationKind::RandomPermutation => "random_permutation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManipulationProvenance {
    pub kind: ManipulationKind,
    pub seed: Option<u64>,
    pub original_digest: String,
    pub manipulated_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manipulated {
    pub table: TruncatedTable,
    pub provenance: ManipulationProvenance,
}

fn provenance(
    kind: ManipulationKind,
    seed: Option<u64>,
    from: &TruncatedTable,
    to: &TruncatedTable,
) -> ManipulationProvenance {
    ManipulationProvenance {
        kind,
        seed,
        original_digest: from.digest(),
        manipulated_digest: to.digest(),
    }
}

/// Reverses the feature order while keeping the |SHAP| magnitudes in place, and
/// gives every feature the opposite of its original sign. Feature values,
/// averages and descriptions travel with their feature.
pub fn invert_and_flip(table: &TruncatedTable) -> Result<Manipulated> {
    let n = table.n();
    if n == 0 {
        return Err(Error::Input("cannot manipulate an empty table".into()));
    }
    let mut rows = Vec::with_capacity(n);
    for (pos, source) in table.rows.iter().rev().enumerate() {
        let original_sign = Sign::of(source.shap_value).ok_or_else(|| Error::DegenerateSign {
            feature: source.name().to_string(),
        })?;
        let magnitude = table.rows[pos].shap_value.abs();
        if magnitude == 0.0 {
            return Err(Error::DegenerateSign {
                feature: table.rows[pos].name().to_string(),
            });
        }
        let mut row = source.clone();
        row.shap_value = magnitude * f64::from(original_sign.flipped().as_i8());
        rows.push(row);
    }
    let manipulated = TruncatedTable { rows, ..table.clone() };
    Ok(Manipulated {
        provenance: provenance(ManipulationKind::InvertFlip, None, table, &manipulated),
        table: manipulated,
    })
}

/// Permutes the SHAP column (sign and magnitude together) across the rows with a
/// seeded uniform permutation, redrawing until the column actually changes.
pub fn random_shap_permutation(table: &TruncatedTable, seed: u64) -> Result<Manipulated> {
    let n = table.n();
    if n < 2 {
        return Err(Error::Input(format!(
            "a non-identity SHAP permutation needs at least 2 rows, table has {n}"
        )));
    }
    let original: Vec<f64> = table.rows.iter().map(|r| r.shap_value).collect();
    if original.iter().all(|v| *v == original[0]) {
        return Err(Error::Input(
            "all SHAP values are equal; every permutation is the identity".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut column = original.clone();
    for _ in 0..MAX_PERMUTATION_DRAWS {
        column.copy_from_slice(&original);
        column.shuffle(&mut rng);
        if column != original {
            let mut manipulated = table.clone();
            for (row, v) in manipulated.rows.iter_mut().zip(&column) {
                row.shap_value = *v;
            }
            return Ok(Manipulated {
                provenance: provenance(ManipulationKind::RandomPermutation, Some(seed), table, &manipulated),
                table: manipulated,
            });
        }
    }
    Err(Error::Input(format!(
        "no non-identity permutation after {MAX_PERMUTATION_DRAWS} draws"
    )))
}

//! Seeded per-source sampling without replacement, then a seeded shuffle.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::manifest::Manifest;

/// An exact fraction in `(0, 1]`, written `"2/3"`, `"0.5"` or `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FractionRepr", into = "String")]
pub struct Fraction {
    num: u64,
    den: u64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FractionRepr {
    Text(String),
    Number(f64),
}

impl TryFrom<FractionRepr> for Fraction {
    type Error = ForgeError;

    fn try_from(r: FractionRepr) -> Result<Self> {
        match r {
            FractionRepr::Text(s) => s.parse(),
            FractionRepr::Number(x) => x.to_string().parse(),
        }
    }
}

impl From<Fraction> for String {
    fn from(f: Fraction) -> String {
        f.to_string()
    }
}

impl Fraction {
    pub const ONE: Fraction = Fraction { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(ForgeError::Config(format!("fraction {num}/{den} must lie in (0, 1]")));
        }
        Ok(Self { num, den })
    }

    /// `floor(self · n)`, computed exactly.
    pub fn of(self, n: usize) -> usize {
        (u128::from(self.num) * n as u128 / u128::from(self.den)) as usize
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Fraction {
    type Err = ForgeError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || ForgeError::Config(format!("cannot parse fraction '{s}'"));
        if let Some((n, d)) = s.split_once('/') {
            return Self::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 18 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        Self::new(int.checked_mul(den).and_then(|v| v.checked_add(frac_v)).ok_or_else(bad)?, den)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSource {
    pub name: String,
    /// Manifest path, relative to the recipe file.
    pub path: PathBuf,
    #[serde(default)]
    pub fraction: Option<Fraction>,
    /// Absolute entry count; overrides `fraction`.
    #[serde(default)]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixRecipe {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "source")]
    pub sources: Vec<MixSource>,
}

fn default_name() -> String {
    "mix".into()
}

impl MixRecipe {
    pub fn parse(text: &str) -> Result<Self> {
        let r: Self = toml::from_str(text).map_err(|e| ForgeError::Config(e.to_string()))?;
        if r.sources.is_empty() {
            return Err(ForgeError::Config("mix recipe lists no sources".into()));
        }
        Ok(r)
    }

    /// Reads the recipe and every manifest it names.
    pub fn load(path: &Path) -> Result<(Self, Vec<Manifest>)> {
        let recipe = Self::parse(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let manifests = recipe.sources.iter().map(|s| Manifest::read(base.join(&s.path))).collect::<Result<_>>()?;
        Ok((recipe, manifests))
    }
}

/// Samples each source without replacement (kept entries only), concatenates
/// in recipe order, and shuffles the result, all from `seed`.
pub fn mix_datasets(recipe: &MixRecipe, manifests: &[Manifest], seed: u64) -> Result<Manifest> {
    if manifests.len() != recipe.sources.len() {
        return Err(ForgeError::Input(format!(
            "recipe names {} sources but {} manifests were given",
            recipe.sources.len(),
            manifests.len()
        )));
    }
    let mut counts = BTreeMap::new();
    let mut out = Vec::new();
    for (i, (src, m)) in recipe.sources.iter().zip(manifests).enumerate() {
        let pool: Vec<_> = m.kept().collect();
        let wanted = match (src.count, src.fraction) {
            (Some(c), _) => c,
            (None, Some(f)) => f.of(pool.len()),
            (None, None) => pool.len(),
        };
        if wanted > pool.len() {
            return Err(ForgeError::SourceTooSmall {
                source_name: src.name.clone(),
                requested: wanted,
                available: pool.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64 + 1));
        let mut picks = index::sample(&mut rng, pool.len(), wanted).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|k| pool[k].clone()));
        *counts.entry(src.name.clone()).or_insert(0) += wanted as u64;
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut manifest = Manifest::new(recipe.name.clone(), seed, out);
    manifest.header.counts = counts;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{ManifestEntry, Task};

    fn manifest(n: usize, prefix: &str) -> Manifest {
        let entries = (0..n)
            .map(|i| ManifestEntry {
                id: format!("{prefix}{i}"),
                source: "academic".into(),
                subtitle: None,
                qa: Vec::new(),
                verdicts: Vec::new(),
                task: Task::VideoQa,
                instruction: None,
            })
            .collect();
        Manifest::new("curate", 0, entries)
    }

    fn recipe(fraction: &str) -> MixRecipe {
        MixRecipe::parse(&format!(
            "seed = 3\n[[source]]\nname = \"a\"\npath = \"a.jsonl\"\nfraction = \"{fraction}\"\n"
        ))
        .unwrap()
    }

    #[test]
    fn fractions() {
        assert_eq!("2/3".parse::<Fraction>().unwrap().of(178_000), 118_666);
        assert_eq!("0.5".parse::<Fraction>().unwrap().of(7), 3);
        assert_eq!("1".parse::<Fraction>().unwrap(), Fraction::ONE);
        assert!("0".parse::<Fraction>().is_err());
        assert!("3/2".parse::<Fraction>().is_err());
        assert!("x".parse::<Fraction>().is_err());
        let r = MixRecipe::parse("[[source]]\nname = \"a\"\npath = \"p\"\nfraction = 0.25\n").unwrap();
        assert_eq!(r.sources[0].fraction.unwrap().of(8), 2);
    }

    #[test]
    fn two_thirds_of_a_scaled_source() {
        let m = mix_datasets(&recipe("2/3"), &[manifest(17_800, "v")], 3).unwrap();
        assert_eq!(m.entries.len(), 11_866);
        assert_eq!(m.header.counts["a"], 11_866);
        let ids: std::collections::BTreeSet<_> = m.entries.iter().map(|e| &e.id).collect();
        assert_eq!(ids.len(), m.entries.len());
    }

    #[test]
    fn full_fraction_is_a_shuffled_identity() {
        let src = manifest(50, "v");
        let m = mix_datasets(&recipe("1"), std::slice::from_ref(&src), 9).unwrap();
        assert_ne!(m.entries, src.entries);
        let mut a: Vec<_> = m.entries.iter().map(|e| e.id.clone()).collect();
        let mut b: Vec<_> = src.entries.iter().map(|e| e.id.clone()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_under_seed() {
        let src = [manifest(40, "v")];
        let a = mix_datasets(&recipe("1/2"), &src, 5).unwrap().to_jsonl().unwrap();
        let b = mix_datasets(&recipe("1/2"), &src, 5).unwrap().to_jsonl().unwrap();
        let c = mix_datasets(&recipe("1/2"), &src, 6).unwrap().to_jsonl().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_count_names_the_source() {
        let mut r = recipe("1");
        r.sources[0].count = Some(11);
        let err = mix_datasets(&r, &[manifest(10, "v")], 1).unwrap_err();
        assert!(err.to_string().contains("'a'"), "{err}");
    }
}

//! Synthetic identities, noisy face realizations, pairs and template
//! descriptions.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::FaceAttr;
use crate::error::{Error, Result};
use crate::text::PROMPT;

pub struct Slot {
    pub name: &'static str,
    pub values: &'static [&'static str],
    /// Can change between two photos of one person.
    pub groomable: bool,
}

pub const SLOTS: [Slot; 8] = [
    Slot {
        name: "skin tone",
        values: &["fair", "light", "olive", "tan", "brown", "dark"],
        groomable: false,
    },
    Slot {
        name: "eye shape",
        values: &["almond-shaped", "round", "hooded", "monolid"],
        groomable: false,
    },
    Slot {
        name: "eye color",
        values: &["brown", "blue", "green", "hazel", "gray"],
        groomable: false,
    },
    Slot {
        name: "hair color",
        values: &["black", "brown", "blond", "red", "gray", "white"],
        groomable: true,
    },
    Slot {
        name: "jawline",
        values: &["square", "rounded", "angular", "soft"],
        groomable: false,
    },
    Slot {
        name: "nose shape",
        values: &["straight", "aquiline", "button", "broad"],
        groomable: false,
    },
    Slot {
        name: "facial hair",
        values: &["clean-shaven", "stubble", "beard", "mustache", "goatee"],
        groomable: true,
    },
    Slot {
        name: "eyebrow thickness",
        values: &["thin", "medium", "thick", "bushy"],
        groomable: false,
    },
];

/// One-hot width over all slots.
pub const ATTR_DIM: usize = 38;

/// Coordinate noise on each realization.
pub const NOISE_STD: f64 = 0.1;
/// Chance that a groomable slot changes in one realization.
pub const GROOMING_FLIP: f64 = 0.15;

/// Matching share of the reference corpus: 7,689 of 79,771 pairs.
pub const DEFAULT_MATCH_FRACTION: f64 = 7689.0 / 79771.0;

fn slot_offset(slot: usize) -> usize {
    SLOTS[..slot].iter().map(|s| s.values.len()).sum()
}

/// A prototype: one value index per slot.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Identity {
    pub id: usize,
    pub values: [usize; 8],
}

/// `n` distinct prototypes with uniformly drawn slot values.
pub fn gen_identities(n: usize, attr_dim: usize, seed: u64) -> Result<Vec<Identity>> {
    if n < 2 {
        return Err(Error::Input(format!("need at least 2 identities, got {n}")));
    }
    if attr_dim != ATTR_DIM {
        return Err(Error::Input(format!("attribute width must be {ATTR_DIM}, got {attr_dim}")));
    }
    let space: usize = SLOTS.iter().map(|s| s.values.len()).product();
    if n > space {
        return Err(Error::Input(format!("at most {space} distinct identities exist")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut values = [0; 8];
        for (v, slot) in values.iter_mut().zip(&SLOTS) {
            *v = rng.random_range(0..slot.values.len());
        }
        if seen.insert(values) {
            out.push(Identity { id: out.len(), values });
        }
    }
    Ok(out)
}

/// Seed for one face realization, a pure function of the dataset seed,
/// pair id and side.
pub fn noise_seed(seed: u64, pair_id: usize, side: usize) -> u64 {
    // splitmix64 finalizer over the packed inputs
    let mut z = seed
        .wrapping_add((pair_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((side as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rounds to 6 decimals so the text file reproduces values exactly.
fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Noisy one-hot realization of an identity.
pub fn realize(identity: &Identity, noise_seed: u64) -> FaceAttr {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut values = identity.values;
    for (v, slot) in values.iter_mut().zip(&SLOTS) {
        if slot.groomable && rng.random_bool(GROOMING_FLIP) {
            let shift = rng.random_range(1..slot.values.len());
            *v = (*v + shift) % slot.values.len();
        }
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let mut attrs = vec![0.0; ATTR_DIM];
    for (i, &v) in values.iter().enumerate() {
        attrs[slot_offset(i) + v] = 1.0;
    }
    for a in &mut attrs {
        *a = round6(*a + noise.sample(&mut rng));
    }
    FaceAttr {
        identity_id: identity.id,
        attrs,
        noise_seed,
    }
}

/// Slot values read back from an attribute vector (argmax per block).
pub fn decode_slots(attrs: &[f64]) -> Result<[usize; 8]> {
    if attrs.len() != ATTR_DIM {
        return Err(Error::dim("decode_slots", &[ATTR_DIM], &[attrs.len()]));
    }
    let mut out = [0; 8];
    for (i, slot) in SLOTS.iter().enumerate() {
        let block = &attrs[slot_offset(i)..slot_offset(i) + slot.values.len()];
        out[i] = crate::decoder::argmax(block);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Match,
    NoMatch,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Match => "match",
            Label::NoMatch => "no_match",
        })
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "match" => Ok(Label::Match),
            "no_match" => Ok(Label::NoMatch),
            _ => Err(Error::Format(format!("unknown label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tier {
    Concise,
    Comprehensive,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Concise => "concise",
            Tier::Comprehensive => "comprehensive",
        })
    }
}

impl FromStr for Tier {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concise" => Ok(Tier::Concise),
            "comprehensive" => Ok(Tier::Comprehensive),
            _ => Err(Error::Config(format!("unknown tier {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub pair_id: usize,
    pub face_a: FaceAttr,
    pub face_b: FaceAttr,
    pub label: Label,
    pub prompt: String,
    pub concise: String,
    pub comprehensive: String,
}

impl PairRecord {
    /// The pair with its faces exchanged and both descriptions re-rendered,
    /// so "first face" and "second face" follow the new order. `seed` is the
    /// seed the record was generated with.
    pub fn swapped(&self, seed: u64) -> Result<Self> {
        let mut rec = Self {
            face_a: self.face_b.clone(),
            face_b: self.face_a.clone(),
            ..self.clone()
        };
        rec.concise = render_descriptions(&rec, Tier::Concise, seed)?;
        rec.comprehensive = render_descriptions(&rec, Tier::Comprehensive, seed)?;
        Ok(rec)
    }

    pub fn description(&self, tier: Tier) -> &str {
        match tier {
            Tier::Concise => &self.concise,
            Tier::Comprehensive => &self.comprehensive,
        }
    }
}

/// Phrase naming a slot value, e.g. "almond-shaped eyes".
pub fn phrase(slot: usize, value: usize) -> String {
    let v = SLOTS[slot].values[value];
    match slot {
        0 => format!("{v} skin"),
        1 => format!("{v} eyes"),
        2 => format!("{v} irises"),
        3 => format!("{v} hair"),
        4 => format!("a {v} jawline"),
        5 => format!("a {v} nose"),
        6 => match v {
            "clean-shaven" => "a clean-shaven face".to_string(),
            "stubble" => "light stubble".to_string(),
            _ => format!("a {v}"),
        },
        _ => format!("{v} eyebrows"),
    }
}

fn list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [a] => a.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

pub const MATCH_VERDICT: &str = "the two faces show the same person.";
pub const NO_MATCH_VERDICT: &str = "the two faces show different people.";

const OPENERS: [&str; 3] = ["comparing the two images,", "looking at both images,", "after careful comparison,"];

/// Template description of a pair. Slot values are read from the
/// realizations; `seed` picks among equivalent phrasings.
pub fn render_descriptions(rec: &PairRecord, tier: Tier, seed: u64) -> Result<String> {
    let a = decode_slots(&rec.face_a.attrs)?;
    let b = decode_slots(&rec.face_b.attrs)?;
    let same: Vec<usize> = (0..SLOTS.len()).filter(|&i| a[i] == b[i]).collect();
    let diff: Vec<usize> = (0..SLOTS.len()).filter(|&i| a[i] != b[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(seed, rec.pair_id, 7));
    let opener = OPENERS.choose(&mut rng).expect("non-empty");
    let is_match = rec.label == Label::Match;
    let verdict = if is_match { MATCH_VERDICT } else { NO_MATCH_VERDICT };
    let names = |slots: &[usize]| list(&slots.iter().map(|&i| SLOTS[i].name.to_string()).collect::<Vec<_>>());
    let shared = |slots: &[usize]| list(&slots.iter().map(|&i| phrase(i, a[i])).collect::<Vec<_>>());
    let mut s = Vec::new();
    match tier {
        Tier::Concise => {
            s.push(format!("{opener} {verdict}"));
            if !same.is_empty() {
                s.push(format!("both faces have {}.", shared(&same[..same.len().min(3)])));
            }
            if diff.is_empty() {
                s.push("no visible difference appears between the two faces.".into());
            } else {
                let shown = &diff[..diff.len().min(3)];
                s.push(format!(
                    "the first face has {}, while the second face has {}.",
                    list(&shown.iter().map(|&i| phrase(i, a[i])).collect::<Vec<_>>()),
                    list(&shown.iter().map(|&i| phrase(i, b[i])).collect::<Vec<_>>())
                ));
            }
            if is_match {
                if diff.is_empty() {
                    s.push("the matching structure of the jawline, nose, and eyes supports the same identity.".into());
                } else {
                    s.push(format!(
                        "the change in {} reflects grooming, and the stable facial structure supports the same identity.",
                        names(&diff)
                    ));
                }
            } else {
                s.push("these differences in stable facial features indicate two distinct individuals.".into());
            }
        }
        Tier::Comprehensive => {
            s.push(format!("{opener} the task is to decide whether the two faces belong to the same person."));
            s.push(format!("on the final verdict, {verdict}"));
            for i in 0..SLOTS.len() {
                if a[i] == b[i] {
                    s.push(format!("{}: both show {}.", SLOTS[i].name, phrase(i, a[i])));
                } else {
                    s.push(format!("{}: {} versus {}.", SLOTS[i].name, phrase(i, a[i]), phrase(i, b[i])));
                }
            }
            let groom_only = diff.iter().all(|&i| SLOTS[i].groomable);
            if diff.is_empty() {
                s.push("no feature differs between the two images, so the faces agree on every point that was examined.".into());
            } else if is_match || groom_only {
                s.push(format!(
                    "the differences are limited to {}, which can change with grooming or lighting, while the stable features stay consistent.",
                    names(&diff)
                ));
            } else {
                s.push(format!(
                    "the differences in {} involve stable features that do not change with grooming or lighting.",
                    names(&diff)
                ));
            }
            s.push(if is_match {
                "taken together, the evidence points to a single individual photographed twice, and the verdict is a match.".to_string()
            } else {
                "taken together, the evidence points to two separate individuals, and the verdict is not a match.".to_string()
            });
        }
    }
    Ok(s.join(" "))
}

/// Random pairs over `identities`. Exactly `round(match_fraction * n)`
/// pairs are matches; their positions are shuffled.
pub fn gen_pairs(identities: &[Identity], n_pairs: usize, match_fraction: f64, seed: u64) -> Result<Vec<PairRecord>> {
    if identities.len() < 2 {
        return Err(Error::Input("pairs need at least 2 identities".into()));
    }
    if !(match_fraction > 0.0 && match_fraction < 1.0) {
        return Err(Error::Input(format!("match_fraction must lie in (0, 1), got {match_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_match = (match_fraction * n_pairs as f64).round() as usize;
    let mut labels: Vec<Label> = (0..n_pairs)
        .map(|i| if i < n_match { Label::Match } else { Label::NoMatch })
        .collect();
    labels.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n_pairs);
    for (pair_id, label) in labels.into_iter().enumerate() {
        let ia = rng.random_range(0..identities.len());
        let ib = match label {
            Label::Match => ia,
            Label::NoMatch => {
                let k = rng.random_range(0..identities.len() - 1);
                if k >= ia {
                    k + 1
                } else {
                    k
                }
            }
        };
        let mut rec = PairRecord {
            pair_id,
            face_a: realize(&identities[ia], noise_seed(seed, pair_id, 0)),
            face_b: realize(&identities[ib], noise_seed(seed, pair_id, 1)),
            label,
            prompt: PROMPT.to_string(),
            concise: String::new(),
            comprehensive: String::new(),
        };
        rec.concise = render_descriptions(&rec, Tier::Concise, seed)?;
        rec.comprehensive = render_descriptions(&rec, Tier::Comprehensive, seed)?;
        out.push(rec);
    }
    Ok(out)
}

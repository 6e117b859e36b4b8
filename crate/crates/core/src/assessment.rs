//! Blinded expert-rating protocol: anonymized presentation bundles, rating
//! import and aggregation into valid-probability and average-rank tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One case with every model's output image.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseEntry {
    pub case: String,
    pub input: Option<PathBuf>,
    /// Model name to output image.
    pub outputs: BTreeMap<String, PathBuf>,
}

/// What raters see: per case, the outputs under anonymous slots 1..=k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleCase {
    pub case: String,
    pub input: Option<PathBuf>,
    pub slots: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyBundle {
    pub cases: Vec<BundleCase>,
}

/// Slot-to-model mapping, kept apart from the bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleKey {
    pub seed: u64,
    pub models: Vec<String>,
    /// Per case, the model shown in slot `i + 1`.
    pub cases: BTreeMap<String, Vec<String>>,
}

impl BundleKey {
    pub fn model_of(&self, case: &str, slot: usize) -> Result<&str> {
        let slots = self.cases.get(case).ok_or_else(|| Error::Protocol(format!("unknown case {case:?}")))?;
        slot.checked_sub(1)
            .and_then(|i| slots.get(i))
            .map(String::as_str)
            .ok_or_else(|| Error::Protocol(format!("unknown slot {slot} for case {case:?}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("key serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    }
}

fn case_rng(seed: u64, case: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(case.as_bytes());
    let d = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(d[..8].try_into().expect("8 bytes")))
}

/// Shuffles every case's outputs into anonymous slots with a per-case
/// permutation derived from `seed` and the case id.
pub fn build_bundle(cases: &[CaseEntry], seed: u64) -> Result<(StudyBundle, BundleKey)> {
    let first = cases.first().ok_or_else(|| Error::Protocol("no cases to bundle".into()))?;
    let models: Vec<String> = first.outputs.keys().cloned().collect();
    if models.len() < 2 {
        return Err(Error::Protocol(format!("need at least 2 models, found {}", models.len())));
    }
    let mut seen = BTreeSet::new();
    let mut bundle = StudyBundle { cases: Vec::new() };
    let mut key = BundleKey { seed, models: models.clone(), cases: BTreeMap::new() };
    for c in cases {
        if !seen.insert(c.case.as_str()) {
            return Err(Error::Protocol(format!("case {:?} listed twice", c.case)));
        }
        if !c.outputs.keys().eq(models.iter()) {
            return Err(Error::Protocol(format!(
                "unequal case coverage: case {:?} has models {:?}, expected {:?}",
                c.case,
                c.outputs.keys().collect::<Vec<_>>(),
                models
            )));
        }
        let mut order = models.clone();
        order.shuffle(&mut case_rng(seed, &c.case));
        bundle.cases.push(BundleCase {
            case: c.case.clone(),
            input: c.input.clone(),
            slots: order.iter().map(|m| c.outputs[m].clone()).collect(),
        });
        key.cases.insert(c.case.clone(), order);
    }
    Ok((bundle, key))
}

/// Reads `root/<model>/<case>.<ext>`; a subdirectory named `input` holds
/// the inputs shown alongside.
pub fn scan_case_outputs(root: &Path) -> Result<Vec<CaseEntry>> {
    let read = |d: &Path| -> Result<BTreeMap<String, PathBuf>> {
        let mut out = BTreeMap::new();
        for e in fs::read_dir(d).map_err(|e| Error::io(d, e))? {
            let p = e.map_err(|e| Error::io(d, e))?.path();
            if p.is_file() {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    out.insert(stem.to_string(), p.clone());
                }
            }
        }
        Ok(out)
    };
    let mut per_model: BTreeMap<String, BTreeMap<String, PathBuf>> = BTreeMap::new();
    let mut inputs = BTreeMap::new();
    for e in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = e.map_err(|e| Error::io(root, e))?.path();
        if !p.is_dir() {
            continue;
        }
        let name = p.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if name == "input" {
            inputs = read(&p)?;
        } else {
            per_model.insert(name, read(&p)?);
        }
    }
    let mut case_ids: BTreeSet<String> = BTreeSet::new();
    per_model.values().for_each(|m| case_ids.extend(m.keys().cloned()));
    Ok(case_ids
        .into_iter()
        .map(|case| CaseEntry {
            input: inputs.get(&case).cloned(),
            outputs: per_model.iter().filter_map(|(m, files)| files.get(&case).map(|p| (m.clone(), p.clone()))).collect(),
            case,
        })
        .collect())
}

/// Copies the bundle into `out/<case>/slot-<k>.<ext>` (and `input.<ext>`)
/// and writes `out/bundle.json`. The key is not written here.
pub fn write_bundle(bundle: &StudyBundle, out: &Path) -> Result<StudyBundle> {
    let mut written = StudyBundle { cases: Vec::new() };
    for c in &bundle.cases {
        let dir = out.join(&c.case);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let copy = |src: &Path, stem: &str| -> Result<PathBuf> {
            let ext = src.extension().and_then(|e| e.to_str()).unwrap_or("png");
            let dst = dir.join(format!("{stem}.{ext}"));
            fs::copy(src, &dst).map_err(|e| Error::io(src, e))?;
            Ok(dst)
        };
        let input = c.input.as_deref().map(|p| copy(p, "input")).transpose()?;
        let slots = c.slots.iter().enumerate().map(|(i, p)| copy(p, &format!("slot-{}", i + 1))).collect::<Result<_>>()?;
        written.cases.push(BundleCase { case: c.case.clone(), input, slots });
    }
    let manifest = out.join("bundle.json");
    fs::write(&manifest, serde_json::to_string_pretty(&written).expect("bundle serializes")).map_err(|e| Error::io(&manifest, e))?;
    Ok(written)
}

/// One rater's judgement of one anonymized output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub rater: String,
    pub case: String,
    pub slot: usize,
    pub valid: bool,
    pub rank: Option<u32>,
}

pub const RATINGS_HEADER: [&str; 5] = ["rater", "case", "slot", "valid", "rank"];

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" => Some(true),
        "0" | "false" | "no" | "n" => Some(false),
        _ => None,
    }
}

/// Parses a `rater,case,slot,valid,rank` CSV. Rows are numbered by file line
/// (the header is line 1) in error messages.
pub fn parse_ratings(text: &str) -> Result<Vec<RatingRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::Protocol(format!("unreadable header: {e}")))?.clone();
    if header.iter().ne(RATINGS_HEADER) {
        return Err(Error::Protocol(format!("header must be {}, found {:?}", RATINGS_HEADER.join(","), header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    let mut ranks: HashMap<(String, String), HashMap<u32, u64>> = HashMap::new();
    let mut slots_seen: HashMap<(String, String, usize), u64> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Protocol(format!("malformed row: {e}")))?;
        let row = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |m: String| Error::Protocol(format!("row {row}: {m}"));
        let field = |i: usize| rec.get(i).unwrap_or("");
        let rater = field(0).to_string();
        let case = field(1).to_string();
        if rater.is_empty() || case.is_empty() {
            return Err(bad("rater and case are required".into()));
        }
        let slot: usize = field(2).parse().map_err(|_| bad(format!("slot {:?} is not a positive integer", field(2))))?;
        if slot == 0 {
            return Err(bad("slots are numbered from 1".into()));
        }
        let valid = parse_flag(field(3)).ok_or_else(|| bad(format!("valid {:?} is not a yes/no flag", field(3))))?;
        let rank = match (valid, field(4)) {
            (true, "") => return Err(bad("valid rating needs a rank".into())),
            (true, r) => {
                let r: u32 = r.parse().map_err(|_| bad(format!("rank {r:?} is not a positive integer")))?;
                if r == 0 {
                    return Err(bad("ranks start at 1".into()));
                }
                Some(r)
            }
            (false, "") => None,
            (false, _) => return Err(bad("invalid rating must not have a rank".into())),
        };
        if let Some(prev) = slots_seen.insert((rater.clone(), case.clone(), slot), row) {
            return Err(bad(format!("rater {rater:?} rated case {case:?} slot {slot} twice (also row {prev})")));
        }
        if let Some(r) = rank {
            if let Some(prev) = ranks.entry((rater.clone(), case.clone())).or_default().insert(r, row) {
                return Err(bad(format!("tied rank {r} for rater {rater:?} on case {case:?} (also row {prev})")));
            }
        }
        out.push(RatingRecord { rater, case, slot, valid, rank });
    }
    if out.is_empty() {
        return Err(Error::Protocol("ratings file has no rows".into()));
    }
    Ok(out)
}

pub fn load_ratings(path: &Path) -> Result<Vec<RatingRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(&text).map_err(|e| match e {
        Error::Protocol(m) => Error::Protocol(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Denominator of the valid probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// Valid ratings over all ratings of the model.
    #[default]
    PerRating,
    /// Cases where at least half the raters marked the output valid, over
    /// all rated cases.
    PerPatient,
}

impl FromStr for Denominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-rating" => Ok(Denominator::PerRating),
            "per-patient" => Ok(Denominator::PerPatient),
            other => Err(Error::Argument(format!("unknown denominator {other:?} (per-rating, per-patient)"))),
        }
    }
}

impl fmt::Display for Denominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Denominator::PerRating => "per-rating",
            Denominator::PerPatient => "per-patient",
        })
    }
}

/// A rating with its slot resolved to a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoinedRecord {
    pub rater: String,
    pub case: String,
    pub slot: usize,
    pub model: String,
    pub valid: bool,
    pub rank: Option<u32>,
}

pub fn join_records(records: &[RatingRecord], key: &BundleKey) -> Result<Vec<JoinedRecord>> {
    records
        .iter()
        .map(|r| {
            let model = key.model_of(&r.case, r.slot)?.to_string();
            if let Some(rank) = r.rank {
                if rank as usize > key.models.len() {
                    return Err(Error::Protocol(format!("rank {rank} exceeds the {} models shown", key.models.len())));
                }
            }
            Ok(JoinedRecord { rater: r.rater.clone(), case: r.case.clone(), slot: r.slot, model, valid: r.valid, rank: r.rank })
        })
        .collect()
}

fn for_model<'a>(joined: &'a [JoinedRecord], model: &str) -> Result<Vec<&'a JoinedRecord>> {
    let rows: Vec<_> = joined.iter().filter(|r| r.model == model).collect();
    if rows.is_empty() {
        return Err(Error::Protocol(format!("no ratings for model {model:?}")));
    }
    Ok(rows)
}

pub fn valid_probability(records: &[RatingRecord], model: &str, key: &BundleKey, denom: Denominator) -> Result<f64> {
    let joined = join_records(records, key)?;
    let rows = for_model(&joined, model)?;
    Ok(match denom {
        Denominator::PerRating => rows.iter().filter(|r| r.valid).count() as f64 / rows.len() as f64,
        Denominator::PerPatient => {
            let mut per_case: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
            for r in &rows {
                let e = per_case.entry(&r.case).or_default();
                e.0 += r.valid as usize;
                e.1 += 1;
            }
            per_case.values().filter(|(v, n)| 2 * v >= *n).count() as f64 / per_case.len() as f64
        }
    })
}

pub fn average_ranking(records: &[RatingRecord], model: &str, key: &BundleKey) -> Result<f64> {
    let joined = join_records(records, key)?;
    let ranks: Vec<u32> = for_model(&joined, model)?.iter().filter_map(|r| r.rank).collect();
    if ranks.is_empty() {
        return Err(Error::UndefinedRank(model.to_string()));
    }
    Ok(ranks.iter().map(|&r| r as f64).sum::<f64>() / ranks.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub ratings: usize,
    pub valid: usize,
    pub valid_probability: f64,
    /// Absent when the model has no valid ratings.
    pub average_ranking: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssessmentReport {
    pub denominator: Denominator,
    pub models: Vec<ModelSummary>,
    pub records: Vec<JoinedRecord>,
}

/// Summaries for every model in the key that received ratings.
pub fn assess(records: &[RatingRecord], key: &BundleKey, denom: Denominator) -> Result<AssessmentReport> {
    let joined = join_records(records, key)?;
    let mut models = Vec::new();
    for m in &key.models {
        let rows: Vec<_> = joined.iter().filter(|r| &r.model == m).collect();
        if rows.is_empty() {
            continue;
        }
        let average_ranking = match average_ranking(records, m, key) {
            Ok(v) => Some(v),
            Err(Error::UndefinedRank(_)) => None,
            Err(e) => return Err(e),
        };
        models.push(ModelSummary {
            model: m.clone(),
            ratings: rows.len(),
            valid: rows.iter().filter(|r| r.valid).count(),
            valid_probability: valid_probability(records, m, key, denom)?,
            average_ranking,
        });
    }
    Ok(AssessmentReport { denominator: denom, models, records: joined })
}

impl AssessmentReport {
    /// Valid probability per model.
    pub fn valid_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>8} {:>6} {:>10}", "Model", "Ratings", "Valid", "Valid Pos.");
        for m in &self.models {
            let _ = writeln!(s, "{:<16} {:>8} {:>6} {:>10.3}", m.model, m.ratings, m.valid, m.valid_probability);
        }
        let _ = writeln!(s, "denominator: {}", self.denominator);
        s
    }

    /// Average rank per model over valid ratings.
    pub fn ranking_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>12}", "Model", "Avg. Rank");
        for m in &self.models {
            match m.average_ranking {
                Some(r) => {
                    let _ = writeln!(s, "{:<16} {:>12.3}", m.model, r);
                }
                None => {
                    let _ = writeln!(s, "{:<16} {:>12}", m.model, "undefined");
                }
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Key-joined records as CSV.
    pub fn records_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["rater", "case", "slot", "model", "valid", "rank"]).expect("in-memory write");
        for r in &self.records {
            let rank = r.rank.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([&r.rater, &r.case, &r.slot.to_string(), &r.model, &(r.valid as u8).to_string(), &rank])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(case: &str, models: &[&str]) -> CaseEntry {
        CaseEntry {
            case: case.into(),
            input: None,
            outputs: models.iter().map(|m| (m.to_string(), PathBuf::from(format!("{m}/{case}.png")))).collect(),
        }
    }

    const MODELS: [&str; 4] = ["a", "b", "c", "d"];

    #[test]
    fn bundle_is_a_reproducible_permutation() {
        let cases = [entry("p1", &MODELS)];
        let (b1, k1) = build_bundle(&cases, 7).unwrap();
        let (b2, k2) = build_bundle(&cases, 7).unwrap();
        assert_eq!((&b1, &k1), (&b2, &k2));
        let mut perm = k1.cases["p1"].clone();
        perm.sort();
        assert_eq!(perm, MODELS);
        for (i, path) in b1.cases[0].slots.iter().enumerate() {
            let model = k1.model_of("p1", i + 1).unwrap();
            assert_eq!(path, &PathBuf::from(format!("{model}/p1.png")));
        }
    }

    #[test]
    fn slot_one_is_uniform() {
        let cases = [entry("p1", &MODELS)];
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for seed in 0..1000 {
            let (_, k) = build_bundle(&cases, seed).unwrap();
            *counts.entry(k.cases["p1"][0].clone()).or_default() += 1;
        }
        for m in MODELS {
            let c = counts[m];
            assert!((200..=300).contains(&c), "{m}: {c}");
        }
    }

    #[test]
    fn bundle_rejects_unequal_coverage() {
        let cases = [entry("p1", &MODELS), entry("p2", &MODELS[..3])];
        assert!(matches!(build_bundle(&cases, 1), Err(Error::Protocol(_))));
        assert!(matches!(build_bundle(&[entry("p1", &["a"])], 1), Err(Error::Protocol(_))));
    }

    #[test]
    fn key_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, k) = build_bundle(&[entry("p1", &MODELS), entry("p2", &MODELS)], 3).unwrap();
        let p = dir.path().join("key.json");
        k.save(&p).unwrap();
        assert_eq!(BundleKey::load(&p).unwrap(), k);
    }

    fn key_for(cases: usize) -> BundleKey {
        BundleKey {
            seed: 0,
            models: MODELS.iter().map(|s| s.to_string()).collect(),
            cases: (0..cases).map(|i| (format!("p{i}"), MODELS.iter().map(|s| s.to_string()).collect())).collect(),
        }
    }

    /// 10 cases × 3 raters rating slot 1 (model `a`), `valid` of them valid.
    fn csv_with_valid(valid: usize) -> String {
        let mut s = String::from("rater,case,slot,valid,rank\n");
        let mut k = 0;
        for case in 0..10 {
            for rater in 0..3 {
                let ok = k < valid;
                k += 1;
                let _ = writeln!(s, "r{rater},p{case},1,{},{}", ok as u8, if ok { "1" } else { "" });
            }
        }
        s
    }

    #[test]
    fn valid_probability_examples() {
        let key = key_for(10);
        let half = parse_ratings(&csv_with_valid(15)).unwrap();
        assert_eq!(valid_probability(&half, "a", &key, Denominator::PerRating).unwrap(), 0.5);
        let seven = parse_ratings(&csv_with_valid(7)).unwrap();
        let p = valid_probability(&seven, "a", &key, Denominator::PerRating).unwrap();
        assert!((p - 7.0 / 30.0).abs() < 1e-12);
        assert_eq!(format!("{p:.3}"), "0.233");
        let none = parse_ratings(&csv_with_valid(0)).unwrap();
        assert_eq!(valid_probability(&none, "a", &key, Denominator::PerRating).unwrap(), 0.0);
        assert!(matches!(average_ranking(&none, "a", &key), Err(Error::UndefinedRank(_))));
        // first 15 ratings cover cases p0..p4 fully valid
        assert_eq!(valid_probability(&half, "a", &key, Denominator::PerPatient).unwrap(), 0.5);
    }

    #[test]
    fn average_ranking_examples() {
        let key = key_for(6);
        let rows = |ranks: &[u32]| -> Vec<RatingRecord> {
            ranks
                .iter()
                .enumerate()
                .map(|(i, &r)| RatingRecord { rater: "r".into(), case: format!("p{i}"), slot: 2, valid: true, rank: Some(r) })
                .collect()
        };
        let check = |ranks: &[u32], want: f64| assert!((average_ranking(&rows(ranks), "b", &key).unwrap() - want).abs() < 1e-9);
        check(&[1, 1, 2], 4.0 / 3.0);
        check(&[1, 1, 1], 1.0);
        check(&[1, 2, 1, 1, 2, 1], 4.0 / 3.0);
    }

    #[test]
    fn csv_validation() {
        let tie = "rater,case,slot,valid,rank\nr1,p0,1,1,1\nr1,p0,2,1,2\nr1,p0,3,1,1\n";
        let err = parse_ratings(tie).unwrap_err().to_string();
        assert!(err.contains("row 4"), "{err}");
        assert!(parse_ratings("rater,case,slot,valid,rank\n").is_err());
        assert!(parse_ratings("").is_err());
        assert!(parse_ratings("a,b,c\n1,2,3\n").is_err());
        assert!(parse_ratings("rater,case,slot,valid,rank\nr,p,1,0,2\n").is_err());
        assert!(parse_ratings("rater,case,slot,valid,rank\nr,p,1,1,\n").is_err());
        let key = key_for(1);
        let r = parse_ratings("rater,case,slot,valid,rank\nr,p0,9,0,\n").unwrap();
        assert!(matches!(valid_probability(&r, "a", &key, Denominator::PerRating), Err(Error::Protocol(_))));
    }

    #[test]
    fn relabeling_preserves_per_slot_ratings() {
        let key = key_for(10);
        let recs = parse_ratings(&csv_with_valid(12)).unwrap();
        let mut other = key.clone();
        for v in other.cases.values_mut() {
            v.reverse();
        }
        let slots = |k: &BundleKey| {
            let mut v: Vec<(usize, bool, Option<u32>)> =
                join_records(&recs, k).unwrap().into_iter().map(|r| (r.slot, r.valid, r.rank)).collect();
            v.sort();
            v
        };
        assert_eq!(slots(&key), slots(&other));
    }

    #[test]
    fn report_tables() {
        let key = key_for(10);
        let recs = parse_ratings(&csv_with_valid(15)).unwrap();
        let rep = assess(&recs, &key, Denominator::PerRating).unwrap();
        assert_eq!(rep.models.len(), 1);
        assert!(rep.valid_table().contains("0.500"));
        assert!(rep.ranking_table().contains("1.000"));
        assert_eq!(rep.records_csv().lines().count(), 31);
    }
}

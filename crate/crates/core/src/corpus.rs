//! Corpus ingestion, class census, and the pair-stratified split.
//!
//! A corpus is either a `<letter>/<position>/` directory tree or a root holding
//! `manifest.csv`. Samples are ordered by (letter index, position, sample id).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::labels::{LetterClass, Pair, PositionClass, NUM_LETTERS, NUM_POSITIONS};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const DEFAULT_RATIOS: [f64; 3] = [0.70, 0.10, 0.20];
const IMAGE_EXTENSIONS: [&str; 2] = ["png", "bmp"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LetterSample {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub letter: LetterClass,
    pub position: PositionClass,
}

impl LetterSample {
    pub fn pair(&self) -> Pair {
        (self.letter, self.position)
    }
}

/// Immutable, validated catalogue of samples.
#[derive(Clone, Debug)]
pub struct CorpusManifest {
    samples: Vec<LetterSample>,
    pair_counts: BTreeMap<Pair, usize>,
    index: HashMap<String, usize>,
}

impl CorpusManifest {
    /// Builds a manifest from samples, sorting them and checking id uniqueness.
    pub fn from_samples(mut samples: Vec<LetterSample>) -> Result<Self> {
        samples.sort_by(|a, b| (a.letter, a.position, &a.sample_id).cmp(&(b.letter, b.position, &b.sample_id)));
        let mut index = HashMap::with_capacity(samples.len());
        let mut pair_counts = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if index.insert(s.sample_id.clone(), i).is_some() {
                return Err(Error::DuplicateSample(s.sample_id.clone()));
            }
            *pair_counts.entry(s.pair()).or_insert(0) += 1;
        }
        Ok(Self {
            samples,
            pair_counts,
            index,
        })
    }

    pub fn samples(&self) -> &[LetterSample] {
        &self.samples
    }

    pub fn pair_counts(&self) -> &BTreeMap<Pair, usize> {
        &self.pair_counts
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&LetterSample> {
        self.index.get(sample_id).map(|&i| &self.samples[i])
    }

    /// Resolves ids to samples, failing on the first unknown id.
    pub fn resolve<'a, S: AsRef<str>>(&'a self, ids: &[S]) -> Result<Vec<&'a LetterSample>> {
        ids.iter()
            .map(|id| {
                self.get(id.as_ref())
                    .ok_or_else(|| Error::UnknownSample(id.as_ref().to_string()))
            })
            .collect()
    }

    /// Writes `sample_id,image_path,letter,position` rows. Images under the
    /// CSV's directory are stored relative to it.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "image_path", "letter", "position"])?;
        for s in &self.samples {
            let stored = match s.image_path.strip_prefix(base) {
                Ok(rel) if !base.as_os_str().is_empty() => rel,
                _ => s.image_path.as_path(),
            };
            w.write_record([
                s.sample_id.as_str(),
                &stored.to_string_lossy(),
                s.letter.name(),
                &s.position.code().to_string(),
            ])?;
        }
        w.flush().at(path)?;
        Ok(())
    }
}

/// Loads `root/manifest.csv` if present, otherwise scans the directory tree.
pub fn load_manifest(root: &Path) -> Result<CorpusManifest> {
    if !root.is_dir() {
        return Err(Error::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        });
    }
    let csv_path = root.join(MANIFEST_FILE);
    if csv_path.is_file() {
        return checked(root, read_manifest_csv(&csv_path)?);
    }
    scan_manifest(root)
}

/// Scans `<Letter>/<Code>/*.png|bmp` under `root`, ignoring any existing manifest file.
pub fn scan_manifest(root: &Path) -> Result<CorpusManifest> {
    if !root.is_dir() {
        return Err(Error::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        });
    }
    checked(root, scan_tree(root)?)
}

fn checked(root: &Path, samples: Vec<LetterSample>) -> Result<CorpusManifest> {
    if samples.is_empty() {
        return Err(Error::NoSamples(root.to_path_buf()));
    }
    for s in &samples {
        check_image(&s.image_path)?;
    }
    CorpusManifest::from_samples(samples)
}

/// Reads a manifest CSV; relative image paths resolve against the CSV's directory.
pub fn read_manifest_csv(path: &Path) -> Result<Vec<LetterSample>> {
    #[derive(Deserialize)]
    struct Row {
        sample_id: String,
        image_path: PathBuf,
        letter: String,
        position: String,
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path)?;
    let mut samples = Vec::new();
    for row in reader.deserialize() {
        let row: Row = row?;
        let image_path = if row.image_path.is_absolute() {
            row.image_path
        } else {
            base.join(row.image_path)
        };
        let letter = LetterClass::from_name(row.letter.trim()).ok_or_else(|| Error::UnknownLetter {
            name: row.letter.clone(),
            path: image_path.clone(),
        })?;
        let position = PositionClass::from_code(row.position.trim()).ok_or_else(|| Error::InvalidPosition {
            code: row.position.clone(),
            path: image_path.clone(),
        })?;
        samples.push(LetterSample {
            sample_id: row.sample_id,
            image_path,
            letter,
            position,
        });
    }
    Ok(samples)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        let hidden = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'));
        if !hidden {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn scan_tree(root: &Path) -> Result<Vec<LetterSample>> {
    let mut samples = Vec::new();
    for letter_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = letter_dir.file_name().unwrap().to_string_lossy().into_owned();
        let letter = LetterClass::from_name(&name).ok_or_else(|| Error::UnknownLetter {
            name: name.clone(),
            path: letter_dir.clone(),
        })?;
        for pos_dir in sorted_entries(&letter_dir)?.into_iter().filter(|p| p.is_dir()) {
            let code = pos_dir.file_name().unwrap().to_string_lossy().into_owned();
            let position = PositionClass::from_code(&code).ok_or_else(|| Error::InvalidPosition {
                code: code.clone(),
                path: pos_dir.clone(),
            })?;
            for file in sorted_entries(&pos_dir)? {
                if !file.is_file() || !has_image_extension(&file) {
                    continue;
                }
                let stem = file.file_stem().unwrap().to_string_lossy();
                samples.push(LetterSample {
                    sample_id: format!("{name}/{code}/{stem}"),
                    image_path: file,
                    letter,
                    position,
                });
            }
        }
    }
    Ok(samples)
}

fn check_image(path: &Path) -> Result<()> {
    let unreadable = |reason: String| Error::UnreadableImage {
        path: path.to_path_buf(),
        reason,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|e| unreadable(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| unreadable(e.to_string()))?;
    let (w, h) = reader.into_dimensions().map_err(|e| unreadable(e.to_string()))?;
    if w == 0 || h == 0 {
        return Err(unreadable("zero-size image".into()));
    }
    Ok(())
}

/// Train/validation/test partition of sample ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Checks that the lists partition exactly the manifest's ids.
    pub fn validate_against(&self, manifest: &CorpusManifest) -> Result<()> {
        let mut seen = HashSet::with_capacity(manifest.len());
        for id in self.train.iter().chain(&self.validation).chain(&self.test) {
            if manifest.get(id).is_none() {
                return Err(Error::UnknownSample(id.clone()));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidSplit(format!("sample {id:?} appears twice")));
            }
        }
        if seen.len() != manifest.len() {
            return Err(Error::InvalidSplit(format!(
                "split covers {} of {} samples",
                seen.len(),
                manifest.len()
            )));
        }
        Ok(())
    }
}

fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::InvalidSplit(format!(
            "ratios must be non-negative, got {ratios:?}"
        )));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSplit(format!("ratios must sum to 1, got {sum}")));
    }
    Ok(())
}

/// Largest-remainder allocation of `n` items; ties go to the earlier split.
pub fn allocate(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    match n {
        0 => return [0, 0, 0],
        1 => return [1, 0, 0],
        2 => return [1, 0, 1],
        _ => {}
    }
    let quotas = ratios.map(|r| r * n as f64);
    // Guard against products like 0.7 * 30 = 20.999999999999996.
    let mut counts = quotas.map(|q| (q + 1e-9).floor() as usize);
    let mut remainder = n - counts.iter().sum::<usize>().min(n);
    let mut order = [0usize, 1, 2];
    let frac = |i: usize| quotas[i] - counts[i] as f64;
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if remainder == 0 {
            break;
        }
        counts[i] += 1;
        remainder -= 1;
    }
    counts
}

/// Shuffles each observed pair with one seeded stream and allocates it by `ratios`.
pub fn stratified_split(manifest: &CorpusManifest, ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    validate_ratios(ratios)?;
    if manifest.is_empty() {
        return Err(Error::InvalidSplit("manifest is empty".into()));
    }
    let mut groups: BTreeMap<Pair, Vec<&str>> = BTreeMap::new();
    for s in manifest.samples() {
        groups.entry(s.pair()).or_default().push(&s.sample_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = SplitManifest {
        seed,
        ratios,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for ids in groups.values_mut() {
        ids.shuffle(&mut rng);
        let [n_train, n_val, _] = allocate(ids.len(), ratios);
        let (train, rest) = ids.split_at(n_train);
        let (val, test) = rest.split_at(n_val);
        split.train.extend(train.iter().map(|s| s.to_string()));
        split.validation.extend(val.iter().map(|s| s.to_string()));
        split.test.extend(test.iter().map(|s| s.to_string()));
    }
    Ok(split)
}

/// Letter and position histograms over a subset of the manifest.
pub fn class_counts<S: AsRef<str>>(
    manifest: &CorpusManifest,
    subset: &[S],
) -> Result<([usize; NUM_LETTERS], [usize; NUM_POSITIONS])> {
    let mut letters = [0usize; NUM_LETTERS];
    let mut positions = [0usize; NUM_POSITIONS];
    for s in manifest.resolve(subset)? {
        letters[s.letter.index()] += 1;
        positions[s.position.index()] += 1;
    }
    Ok((letters, positions))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, letter: &str, pos: &str) -> LetterSample {
        LetterSample {
            sample_id: id.into(),
            image_path: PathBuf::from(format!("{id}.png")),
            letter: LetterClass::from_name(letter).unwrap(),
            position: PositionClass::from_code(pos).unwrap(),
        }
    }

    fn manifest(pairs: &[(&str, &str, usize)]) -> CorpusManifest {
        let mut v = Vec::new();
        for (l, p, n) in pairs {
            for i in 0..*n {
                v.push(sample(&format!("{l}-{p}-{i:03}"), l, p));
            }
        }
        CorpusManifest::from_samples(v).unwrap()
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate(10, DEFAULT_RATIOS), [7, 1, 2]);
        assert_eq!(allocate(20, DEFAULT_RATIOS), [14, 2, 4]);
        assert_eq!(allocate(1, DEFAULT_RATIOS), [1, 0, 0]);
        assert_eq!(allocate(2, DEFAULT_RATIOS), [1, 0, 1]);
        // 3 * (0.7, 0.1, 0.2) = (2.1, 0.3, 0.6): floors (2,0,0), the spare goes to test.
        assert_eq!(allocate(3, DEFAULT_RATIOS), [2, 0, 1]);
        assert_eq!(allocate(30, DEFAULT_RATIOS), [21, 3, 6]);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let err = CorpusManifest::from_samples(vec![sample("a", "Alef", "I"), sample("a", "Baa", "M")]);
        assert!(matches!(err, Err(Error::DuplicateSample(_))));
    }

    #[test]
    fn ordering_is_by_letter_then_position_then_id() {
        let m = CorpusManifest::from_samples(vec![
            sample("z", "Baa", "B"),
            sample("b", "Alef", "I"),
            sample("a", "Alef", "I"),
            sample("c", "Alef", "E"),
        ])
        .unwrap();
        let ids: Vec<_> = m.samples().iter().map(|s| s.sample_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b", "z"]);
    }

    #[test]
    fn tiny_pairs_follow_fixed_rule() {
        let m = manifest(&[("Alef", "I", 1), ("Baa", "M", 2), ("Taa", "E", 10)]);
        let s = stratified_split(&m, DEFAULT_RATIOS, 3).unwrap();
        let count = |ids: &[String], prefix: &str| ids.iter().filter(|i| i.starts_with(prefix)).count();
        assert_eq!(count(&s.train, "Alef"), 1);
        assert_eq!(count(&s.validation, "Alef") + count(&s.test, "Alef"), 0);
        assert_eq!(
            (
                count(&s.train, "Baa"),
                count(&s.validation, "Baa"),
                count(&s.test, "Baa")
            ),
            (1, 0, 1)
        );
        assert_eq!(
            (
                count(&s.train, "Taa"),
                count(&s.validation, "Taa"),
                count(&s.test, "Taa")
            ),
            (7, 1, 2)
        );
        s.validate_against(&m).unwrap();
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let m = manifest(&[("Alef", "I", 50), ("Baa", "M", 50)]);
        let a = stratified_split(&m, DEFAULT_RATIOS, 7).unwrap().to_json().unwrap();
        let b = stratified_split(&m, DEFAULT_RATIOS, 7).unwrap().to_json().unwrap();
        let c = stratified_split(&m, DEFAULT_RATIOS, 8).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let v: serde_json::Value = serde_json::from_str(&a).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 5);
        assert!(a.find("\"seed\"").unwrap() < a.find("\"ratios\"").unwrap());
        assert!(a.find("\"validation\"").unwrap() < a.find("\"test\"").unwrap());
    }

    #[test]
    fn bad_ratios_are_rejected() {
        let m = manifest(&[("Alef", "I", 5)]);
        assert!(stratified_split(&m, [0.5, 0.5, 0.5], 0).is_err());
        assert!(stratified_split(&m, [1.2, -0.1, -0.1], 0).is_err());
    }

    #[test]
    fn class_count_examples() {
        let m = manifest(&[("Alef", "I", 3), ("Baa", "M", 2)]);
        let ids: Vec<_> = m.samples().iter().map(|s| s.sample_id.clone()).collect();
        let (l, p) = class_counts(&m, &ids).unwrap();
        assert_eq!(l[0], 3);
        assert_eq!(l[1], 2);
        assert_eq!(p[PositionClass::Isolated.index()], 3);
        assert_eq!(p[PositionClass::Middle.index()], 2);
        let (l, p) = class_counts::<String>(&m, &[]).unwrap();
        assert!(l.iter().chain(p.iter()).all(|&c| c == 0));
        assert!(matches!(class_counts(&m, &["nope"]), Err(Error::UnknownSample(_))));
    }
}

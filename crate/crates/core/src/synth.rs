//! Planted-signal corpus generator.
//!
//! Clean and defect-introducing commits draw code tokens from the same pool;
//! only the defective lines of defect-introducing commits carry one of the
//! risky tokens. Fix links point at exactly those lines.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CommitRecord, DiffLine, FileChange, FixLink, LineKey, METRIC_COUNT};
use crate::error::{Error, Result};

/// Tokens planted only in defective lines.
pub const RISKY_TOKENS: [&str; 3] = ["badcall", "unsafe_free", "racy_lock"];

const KEYWORDS: [&str; 12] = [
    "if", "else", "return", "for", "while", "self", "let", "def", "import", "None", "true", "false",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub commits: usize,
    pub defect_ratio: f64,
    /// Size of the identifier pool shared by all commits.
    pub vocabulary_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            commits: 2000,
            defect_ratio: 0.10,
            vocabulary_size: 2000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.commits < 2 {
            return Err(Error::InvalidInput(
                "synthetic corpus needs at least 2 commits".into(),
            ));
        }
        if !(0.08..=0.13).contains(&self.defect_ratio) {
            return Err(Error::InvalidInput(format!(
                "defect ratio must be within [0.08, 0.13], got {}",
                self.defect_ratio
            )));
        }
        if self.vocabulary_size == 0 {
            return Err(Error::InvalidInput(
                "vocabulary size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn defective_commits(&self) -> usize {
        ((self.commits as f64 * self.defect_ratio).round() as usize).clamp(1, self.commits - 1)
    }
}

/// Generated commits, in timestamp order, and their fix links.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub commits: Vec<CommitRecord>,
    pub fix_links: Vec<FixLink>,
}

fn identifier(rng: &mut ChaCha8Rng, pool: usize) -> String {
    // squared uniform skews usage toward low ids, like real identifier frequencies
    let u: f64 = rng.gen();
    format!("id{}", ((u * u * pool as f64) as usize).min(pool - 1))
}

fn code_line(rng: &mut ChaCha8Rng, pool: usize, risky: Option<&str>) -> String {
    let mut words: Vec<String> = (0..rng.gen_range(2..=5))
        .map(|_| identifier(rng, pool))
        .collect();
    if rng.gen_bool(0.4) {
        words.insert(0, KEYWORDS.choose(rng).unwrap().to_string());
    }
    if let Some(token) = risky {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, token.to_string());
    }
    let head = words.remove(0);
    let mut line = format!("{head}({})", words.join(", "));
    match rng.gen_range(0..4) {
        0 => line.push_str(&format!(" + {}", rng.gen_range(0..1000))),
        1 => line.push_str(" == \"msg\""),
        _ => {}
    }
    line
}

fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum()
}

/// Generates a corpus; identical configs give identical corpora.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..cfg.commits).collect();
    order.shuffle(&mut rng);
    let defective: BTreeSet<usize> = order[..cfg.defective_commits()].iter().copied().collect();
    let width = cfg.commits.to_string().len().max(5);

    let mut commits = Vec::with_capacity(cfg.commits);
    let mut fix_links = Vec::new();
    let mut timestamp = 1_500_000_000i64;
    for i in 0..cfg.commits {
        timestamp += rng.gen_range(60..7200);
        let is_defective = defective.contains(&i);
        let commit_id = format!("c{i:0width$}");
        let subsystems = rng.gen_range(1..=3usize);
        let n_files = rng.gen_range(1..=3usize);
        let mut files = Vec::with_capacity(n_files);
        for f in 0..n_files {
            let mut file = FileChange::new(format!(
                "pkg{}/mod{}/file{}.py",
                f % subsystems,
                rng.gen_range(0..40),
                f
            ));
            // skewed size: most files get a few lines, some get dozens
            let u: f64 = rng.gen();
            for index in 0..2 + (u * u * 38.0) as usize {
                file.added_lines.push(DiffLine {
                    index,
                    text: code_line(&mut rng, cfg.vocabulary_size, None),
                });
            }
            for index in 0..rng.gen_range(0..=6usize) {
                file.removed_lines.push(DiffLine {
                    index,
                    text: code_line(&mut rng, cfg.vocabulary_size, None),
                });
            }
            files.push(file);
        }
        let mut touched = BTreeSet::new();
        if is_defective {
            let candidates: Vec<(usize, usize)> = files
                .iter()
                .enumerate()
                .flat_map(|(f, file)| (0..file.added_lines.len()).map(move |l| (f, l)))
                .collect();
            let planted = rng.gen_range(1..=3usize).min(candidates.len());
            for &(f, l) in candidates.choose_multiple(&mut rng, planted) {
                let token = RISKY_TOKENS.choose(&mut rng).unwrap();
                files[f].added_lines[l].text =
                    code_line(&mut rng, cfg.vocabulary_size, Some(token));
                touched.insert(LineKey::new(files[f].path.clone(), l));
            }
        }
        let added: Vec<usize> = files.iter().map(|f| f.added_lines.len()).collect();
        let la = added.iter().sum::<usize>() as f64;
        let ld = files.iter().map(|f| f.removed_lines.len()).sum::<usize>() as f64;
        let ndev = rng.gen_range(1..=20) as f64;
        let exp = rng.gen_range(1..=500) as f64;
        let metrics: Vec<f64> = vec![
            subsystems as f64,
            n_files as f64,
            n_files as f64,
            entropy(&added),
            la,
            ld,
            rng.gen_range(10..2000) as f64,
            f64::from(u8::from(rng.gen_bool(0.3))),
            ndev,
            rng.gen_range(0.0..365.0f64).round(),
            rng.gen_range(1..=n_files * 4) as f64,
            exp,
            (exp * rng.gen_range(0.1..1.0f64)).round(),
            (exp * rng.gen_range(0.1..1.0f64)).round(),
        ];
        debug_assert_eq!(metrics.len(), METRIC_COUNT);
        let commit = CommitRecord::new(commit_id.clone(), timestamp, files, metrics, is_defective);
        if is_defective {
            fix_links.push(FixLink {
                introducing_commit_id: commit_id.clone(),
                fixing_commit_id: format!("fix-{commit_id}"),
                touched_keys: touched,
            });
        }
        commits.push(commit);
    }
    Ok(SynthCorpus { commits, fix_links })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::label_defective_lines;
    use crate::features::tokenize_line;

    #[test]
    fn ratio_and_planting() {
        let cfg = SynthConfig {
            commits: 300,
            ..SynthConfig::default()
        };
        let corpus = generate(&cfg).unwrap();
        assert_eq!(corpus.commits.iter().filter(|c| c.label).count(), 30);
        assert_eq!(corpus.fix_links.len(), 30);
        let labelled = label_defective_lines(corpus.commits, &corpus.fix_links).unwrap();
        for c in &labelled {
            c.validate().unwrap();
            let truth = c.defective_line_keys.as_ref().unwrap();
            assert_eq!(c.label, !truth.is_empty());
            for (key, line) in c.added_lines() {
                let risky = tokenize_line(&line.text)
                    .iter()
                    .any(|t| RISKY_TOKENS.contains(&t.as_str()));
                assert_eq!(risky, truth.contains(&key), "{} {}", c.commit_id, line.text);
            }
        }
        assert!(labelled.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    }

    #[test]
    fn seeded_and_validated() {
        let cfg = SynthConfig {
            commits: 50,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.commits, b.commits);
        assert!(generate(&SynthConfig {
            defect_ratio: 0.5,
            ..cfg.clone()
        })
        .is_err());
        assert!(generate(&SynthConfig { commits: 1, ..cfg }).is_err());
    }
}

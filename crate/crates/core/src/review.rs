//! Review-set sampling, adjudication records and consensus resolution.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::pipeline::NoiseAssessment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Mislabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspectSample {
    pub sample_id: String,
    pub rank: usize,
    pub r_i: f64,
    pub p_i: f64,
    pub given_label: usize,
    pub proposed_label: usize,
    pub group_id: String,
    pub frame_index: u64,
    pub thumbnail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReviewSetOptions {
    pub pool_size: usize,
    pub set_size: usize,
    /// `(class, count)` targets, filled in rank order.
    pub class_mix: Vec<(usize, usize)>,
    pub max_per_group: usize,
    pub min_frame_gap: u64,
}

impl Default for ReviewSetOptions {
    fn default() -> Self {
        Self {
            pool_size: 500,
            set_size: 100,
            class_mix: vec![(0, 70), (1, 30)],
            max_per_group: 3,
            min_frame_gap: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewSet {
    pub items: Vec<SuspectSample>,
    /// The class mix could not be met and other classes filled in.
    pub mix_shortfall: bool,
    /// Fewer eligible samples than `set_size`.
    pub partial: bool,
}

pub fn thumbnail_url(sample_id: &str) -> String {
    format!("/api/samples/{sample_id}/thumbnail")
}

/// Greedy selection down the noise-reduction ranking.
///
/// A candidate is eligible while its group holds fewer than
/// `max_per_group` selections and it is at least `min_frame_gap` frames from
/// every selected sample of the same group. The first pass honours the class
/// mix (by given label); a second pass tops up with any eligible class.
pub fn sample_review_set(
    assessments: &[NoiseAssessment],
    ds: &Dataset,
    opts: &ReviewSetOptions,
) -> Result<ReviewSet> {
    if opts.pool_size < opts.set_size {
        return Err(Error::Config(format!(
            "pool_size {} smaller than set_size {}",
            opts.pool_size, opts.set_size
        )));
    }
    let mut ranked: Vec<&NoiseAssessment> = assessments.iter().collect();
    ranked.sort_by(|a, b| a.rank_by_r.cmp(&b.rank_by_r).then_with(|| a.sample_id.cmp(&b.sample_id)));
    let pool: Vec<(&NoiseAssessment, &crate::dataset::SampleRecord)> = ranked
        .into_iter()
        .take(opts.pool_size)
        .map(|a| {
            ds.get(&a.sample_id)
                .map(|r| (a, r))
                .ok_or_else(|| Error::Integrity(format!("unknown sample_id `{}`", a.sample_id)))
        })
        .collect::<Result<_>>()?;

    let mut quota: HashMap<usize, usize> = opts.class_mix.iter().copied().collect();
    let mut taken = vec![false; pool.len()];
    let mut frames_by_group: HashMap<&str, Vec<u64>> = HashMap::new();
    let mut count = 0;
    let eligible = |frames: &HashMap<&str, Vec<u64>>, group: &str, frame: u64| {
        frames.get(group).is_none_or(|fs| {
            fs.len() < opts.max_per_group && fs.iter().all(|&f| f.abs_diff(frame) >= opts.min_frame_gap)
        })
    };

    for (i, (_, r)) in pool.iter().enumerate() {
        if count == opts.set_size {
            break;
        }
        let Some(q) = quota.get_mut(&r.given_label) else {
            continue;
        };
        if *q == 0 || !eligible(&frames_by_group, &r.group_id, r.frame_index) {
            continue;
        }
        *q -= 1;
        taken[i] = true;
        frames_by_group.entry(&r.group_id).or_default().push(r.frame_index);
        count += 1;
    }
    let mix_shortfall = quota.values().any(|&q| q > 0);
    for (i, (_, r)) in pool.iter().enumerate() {
        if count == opts.set_size {
            break;
        }
        if taken[i] || !eligible(&frames_by_group, &r.group_id, r.frame_index) {
            continue;
        }
        taken[i] = true;
        frames_by_group.entry(&r.group_id).or_default().push(r.frame_index);
        count += 1;
    }

    let items = pool
        .iter()
        .zip(&taken)
        .filter(|(_, &t)| t)
        .map(|((a, r), _)| SuspectSample {
            sample_id: a.sample_id.clone(),
            rank: a.rank_by_r,
            r_i: a.r_i,
            p_i: a.p_i,
            given_label: r.given_label,
            proposed_label: a.proposed_label,
            group_id: r.group_id.clone(),
            frame_index: r.frame_index,
            thumbnail: thumbnail_url(&a.sample_id),
        })
        .collect();
    Ok(ReviewSet {
        items,
        mix_shortfall,
        partial: count < opts.set_size,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adjudication {
    pub sample_id: String,
    pub reviewer_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised_label: Option<usize>,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

impl Adjudication {
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        if self.sample_id.is_empty() || self.reviewer_id.is_empty() {
            return Err(Error::Domain("sample_id and reviewer_id must be non-empty".into()));
        }
        match (self.verdict, self.revised_label) {
            (Verdict::Mislabel, None) => {
                Err(Error::Domain("a mislabel verdict needs revised_label".into()))
            }
            (Verdict::Correct, Some(_)) => {
                Err(Error::Domain("revised_label is only allowed with a mislabel verdict".into()))
            }
            (_, Some(l)) if num_classes.is_some_and(|c| l >= c) => {
                Err(Error::Domain(format!("revised_label {l} out of range")))
            }
            _ => Ok(()),
        }
    }
}

/// Latest adjudication per `(sample, reviewer)`; later log entries replace
/// earlier ones.
pub fn effective_votes(adjudications: &[Adjudication]) -> BTreeMap<&str, BTreeMap<&str, &Adjudication>> {
    let mut out: BTreeMap<&str, BTreeMap<&str, &Adjudication>> = BTreeMap::new();
    for a in adjudications {
        out.entry(a.sample_id.as_str())
            .or_default()
            .insert(a.reviewer_id.as_str(), a);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub sample_id: String,
    pub final_verdict: Verdict,
    /// Majority revised label; `None` for a correct verdict or an unresolved tie.
    pub final_label: Option<usize>,
    pub mislabel_votes: usize,
    pub correct_votes: usize,
    /// Mislabel majority without a majority revised label.
    pub unresolved: bool,
}

/// Votes needed for a mislabel verdict: a strict majority of the panel.
pub fn majority(reviewers_required: usize) -> usize {
    reviewers_required / 2 + 1
}

/// Consensus for every sample with at least `reviewers_required` distinct
/// reviewers, plus the ids still pending.
pub fn consensus_partial(
    adjudications: &[Adjudication],
    reviewers_required: usize,
) -> (Vec<ConsensusResult>, Vec<String>) {
    let mut done = Vec::new();
    let mut pending = Vec::new();
    for (sample, votes) in effective_votes(adjudications) {
        if votes.len() < reviewers_required {
            pending.push(sample.to_owned());
            continue;
        }
        let mislabel: Vec<&Adjudication> = votes
            .values()
            .filter(|a| a.verdict == Verdict::Mislabel)
            .copied()
            .collect();
        let is_mislabel = mislabel.len() >= majority(reviewers_required);
        let (final_label, unresolved) = if is_mislabel {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for a in &mislabel {
                if let Some(l) = a.revised_label {
                    *counts.entry(l).or_default() += 1;
                }
            }
            let top = counts.values().copied().max().unwrap_or(0);
            let leaders: Vec<usize> = counts
                .iter()
                .filter(|(_, &c)| c == top)
                .map(|(&l, _)| l)
                .collect();
            match leaders.as_slice() {
                [only] => (Some(*only), false),
                _ => (None, true),
            }
        } else {
            (None, false)
        };
        done.push(ConsensusResult {
            sample_id: sample.to_owned(),
            final_verdict: if is_mislabel { Verdict::Mislabel } else { Verdict::Correct },
            final_label,
            mislabel_votes: mislabel.len(),
            correct_votes: votes.len() - mislabel.len(),
            unresolved,
        });
    }
    (done, pending)
}

/// Consensus over every adjudicated sample; samples with fewer than
/// `reviewers_required` reviewers are a coverage error.
pub fn resolve_consensus(
    adjudications: &[Adjudication],
    reviewers_required: usize,
) -> Result<Vec<ConsensusResult>> {
    let (done, pending) = consensus_partial(adjudications, reviewers_required);
    if !pending.is_empty() {
        return Err(Error::Coverage { ids: pending });
    }
    Ok(done)
}

/// Append-only JSON-lines adjudication log.
#[derive(Debug)]
pub struct AdjudicationLog {
    path: PathBuf,
    file: File,
    entries: Vec<Adjudication>,
}

impl AdjudicationLog {
    /// Opens or creates the log and replays existing entries.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let adj = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    path: path.to_owned(),
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                entries.push(adj);
            }
        } else if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_owned(),
            file,
            entries,
        })
    }

    pub fn append(&mut self, adj: Adjudication) -> Result<()> {
        let line = serde_json::to_string(&adj)? + "\n";
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| Error::io(&self.path, e))?;
        self.entries.push(adj);
        Ok(())
    }

    pub fn entries(&self) -> &[Adjudication] {
        &self.entries
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Renders a feature vector as a 16x16 grayscale PNG heat map. Pixel `p`
/// shows feature `p * d / 256`, min-max scaled.
pub fn feature_thumbnail_png(features: &[f64]) -> Result<Vec<u8>> {
    const SIDE: u32 = 16;
    let lo = features.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = features.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let d = features.len().max(1);
    let img = image::GrayImage::from_fn(SIDE, SIDE, |x, y| {
        let p = (y * SIDE + x) as usize;
        let v = features.get(p * d / (SIDE * SIDE) as usize).copied().unwrap_or(0.0);
        let scaled = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        image::Luma([(scaled * 255.0).round() as u8])
    });
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

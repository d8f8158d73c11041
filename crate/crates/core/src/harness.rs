//! Next-line prediction benchmark: each episode is five context lines, the true
//! sixth line and nine distractors. Candidates are scored by a base model `q`,
//! modulated by `exp(alpha * delta)`, ranked, and summarized by top-3 accuracy
//! and mean reciprocal rank.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arc::{entropy_change, update_belief, BeliefState};
use crate::conversation::{
    perplexity_to_weight, unigram_score, ExternalScoreTable, DEFAULT_UNIGRAM_FLOOR,
};
use crate::corpus::{Dialogue, Utterance};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::stats::{mean_std, paired_t_test, TTestResult};
use crate::universe::UniverseModel;

pub const CONTEXT_LINES: usize = 5;
pub const NUM_DISTRACTORS: usize = 9;
pub const NUM_CANDIDATES: usize = NUM_DISTRACTORS + 1;
pub const EPISODE_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// One prediction instance. Candidates are the distractors with the truth
/// inserted at `truth_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EpisodeRecord", into = "EpisodeRecord")]
pub struct Episode {
    id: String,
    context: Vec<Utterance>,
    truth: Utterance,
    distractors: Vec<Utterance>,
    truth_index: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    #[serde(default = "episode_version")]
    version: u32,
    id: String,
    context: Vec<Utterance>,
    truth: Utterance,
    distractors: Vec<Utterance>,
    #[serde(default)]
    truth_index: usize,
}

fn episode_version() -> u32 {
    EPISODE_VERSION
}

impl TryFrom<EpisodeRecord> for Episode {
    type Error = Error;
    fn try_from(r: EpisodeRecord) -> Result<Self> {
        if r.version != EPISODE_VERSION {
            return Err(Error::Version {
                kind: "episode",
                found: r.version,
                expected: EPISODE_VERSION,
            });
        }
        Episode::new(r.id, r.context, r.truth, r.distractors, r.truth_index)
    }
}

impl From<Episode> for EpisodeRecord {
    fn from(e: Episode) -> Self {
        EpisodeRecord {
            version: EPISODE_VERSION,
            id: e.id,
            context: e.context,
            truth: e.truth,
            distractors: e.distractors,
            truth_index: e.truth_index,
        }
    }
}

impl Episode {
    pub fn new(
        id: impl Into<String>,
        context: Vec<Utterance>,
        truth: Utterance,
        distractors: Vec<Utterance>,
        truth_index: usize,
    ) -> Result<Self> {
        let id = id.into();
        if context.len() != CONTEXT_LINES {
            return Err(Error::InvalidArgument(format!(
                "episode {id}: expected {CONTEXT_LINES} context lines, got {}",
                context.len()
            )));
        }
        if distractors.len() != NUM_DISTRACTORS {
            return Err(Error::InvalidArgument(format!(
                "episode {id}: expected {NUM_DISTRACTORS} distractors, got {}",
                distractors.len()
            )));
        }
        if distractors.contains(&truth) {
            return Err(Error::InvalidArgument(format!(
                "episode {id}: truth repeated among distractors"
            )));
        }
        if truth_index >= NUM_CANDIDATES {
            return Err(Error::InvalidArgument(format!(
                "episode {id}: truth index {truth_index} out of range"
            )));
        }
        Ok(Episode {
            id,
            context,
            truth,
            distractors,
            truth_index,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn context(&self) -> &[Utterance] {
        &self.context
    }

    pub fn truth(&self) -> &Utterance {
        &self.truth
    }

    pub fn distractors(&self) -> &[Utterance] {
        &self.distractors
    }

    pub fn truth_index(&self) -> usize {
        self.truth_index
    }

    /// All ten candidates in ranking order.
    pub fn candidates(&self) -> Vec<&Utterance> {
        let mut c: Vec<&Utterance> = self.distractors.iter().collect();
        c.insert(self.truth_index, &self.truth);
        c
    }
}

pub fn write_episodes(path: impl AsRef<Path>, episodes: &[Episode]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, episodes_to_jsonl(episodes)).map_err(|e| Error::io(path, e))
}

pub fn episodes_to_jsonl(episodes: &[Episode]) -> String {
    let mut out = String::new();
    for e in episodes {
        out.push_str(&serde_json::to_string(e).expect("episode serialization is infallible"));
        out.push('\n');
    }
    out
}

pub fn read_episodes(path: impl AsRef<Path>) -> Result<Vec<Episode>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_episodes(&text)
}

pub fn parse_episodes(text: &str) -> Result<Vec<Episode>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Parse(format!("episode line {}: {e}", n + 1)))
        })
        .collect()
}

/// Split files into validation and test sets. `validation_fraction` of the
/// files (after a seeded shuffle) go to validation.
pub fn split_files(
    files: &[Dialogue],
    validation_fraction: f64,
    seed: u64,
) -> (Vec<Dialogue>, Vec<Dialogue>) {
    let mut idx: Vec<usize> = (0..files.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let n_val = ((files.len() as f64) * validation_fraction.clamp(0.0, 1.0)).round() as usize;
    let (v, t) = idx.split_at(n_val);
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.into_iter().map(|i| files[i].clone()).collect()
    };
    (pick(v), pick(t))
}

/// One episode per file with at least six lines: lines 1-5 are context, line 6
/// the truth. Distractors are drawn uniformly without replacement from the
/// lines of the other files, skipping any line identical to the truth. Each
/// episode uses ChaCha stream `file index` of `seed`.
pub fn build_episodes(
    exec: Exec,
    files: &[Dialogue],
    seed: u64,
    split: Split,
) -> Result<Vec<Episode>> {
    let lines: Vec<(usize, &Utterance)> = files
        .iter()
        .enumerate()
        .flat_map(|(f, d)| d.utterances().iter().map(move |u| (f, u)))
        .collect();
    let distinct: HashSet<&str> = lines.iter().map(|(_, u)| u.text()).collect();
    if distinct.len() < NUM_CANDIDATES {
        return Err(Error::NotEnoughCandidates {
            requested: NUM_CANDIDATES,
            available: distinct.len(),
        });
    }
    let qualifying: Vec<usize> = (0..files.len())
        .filter(|&f| files[f].len() > CONTEXT_LINES)
        .collect();
    let width = files.len().to_string().len();
    par::try_map(exec, &qualifying, |&f| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(f as u64);
        let utts = files[f].utterances();
        let truth = &utts[CONTEXT_LINES];
        let distractors = sample_distractors(&lines, f, truth, &mut rng)?;
        let truth_index = rng.random_range(0..NUM_CANDIDATES);
        Episode::new(
            format!("{split}-{f:0width$}"),
            utts[..CONTEXT_LINES].to_vec(),
            truth.clone(),
            distractors,
            truth_index,
        )
    })
}

fn sample_distractors<R: Rng>(
    lines: &[(usize, &Utterance)],
    file: usize,
    truth: &Utterance,
    rng: &mut R,
) -> Result<Vec<Utterance>> {
    let ok = |(f, u): &(usize, &Utterance)| *f != file && u.text() != truth.text();
    let mut chosen: HashSet<usize> = HashSet::with_capacity(NUM_DISTRACTORS);
    let mut out = Vec::with_capacity(NUM_DISTRACTORS);
    // Rejection draws are cheap when almost every line is eligible; fall back
    // to an explicit eligible list otherwise.
    for _ in 0..NUM_DISTRACTORS * 20 {
        if out.len() == NUM_DISTRACTORS {
            return Ok(out);
        }
        let i = rng.random_range(0..lines.len());
        if ok(&lines[i]) && chosen.insert(i) {
            out.push(lines[i].1.clone());
        }
    }
    if out.len() == NUM_DISTRACTORS {
        return Ok(out);
    }
    let eligible: Vec<usize> = (0..lines.len())
        .filter(|&i| ok(&lines[i]) && !chosen.contains(&i))
        .collect();
    let need = NUM_DISTRACTORS - out.len();
    if eligible.len() < need {
        return Err(Error::NotEnoughCandidates {
            requested: NUM_DISTRACTORS,
            available: out.len() + eligible.len(),
        });
    }
    for j in rand::seq::index::sample(rng, eligible.len(), need) {
        out.push(lines[eligible[j]].1.clone());
    }
    Ok(out)
}

/// Source of base candidate weights `q`.
#[derive(Debug, Clone)]
pub enum Scorer {
    /// Independent Uniform(0,1) weights, derived from `seed` and the episode id.
    Random { seed: u64 },
    /// `1 / perplexity` under a unigram model of the context.
    Unigram { floor: f64 },
    /// `1 / perplexity` from an external table keyed by episode id and candidate index.
    External(ExternalScoreTable),
}

impl Scorer {
    pub fn unigram() -> Self {
        Scorer::Unigram {
            floor: DEFAULT_UNIGRAM_FLOOR,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Random { .. } => "random",
            Scorer::Unigram { .. } => "unigram",
            Scorer::External(_) => "external",
        }
    }

    /// `q` for each candidate of `episode`, in candidate order.
    pub fn q_scores(&self, episode: &Episode) -> Result<Vec<f64>> {
        match self {
            Scorer::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed ^ fnv1a(episode.id()));
                Ok((0..NUM_CANDIDATES)
                    .map(|_| 1.0 - rng.random::<f64>())
                    .collect())
            }
            Scorer::Unigram { floor } => episode
                .candidates()
                .into_iter()
                .map(|c| unigram_score(episode.context(), c, *floor).map(perplexity_to_weight))
                .collect(),
            Scorer::External(table) => {
                let row = table
                    .episode(episode.id())
                    .ok_or_else(|| Error::MissingScores(episode.id().to_owned()))?;
                if row.len() != NUM_CANDIDATES {
                    return Err(Error::MissingScores(format!(
                        "{}: expected {NUM_CANDIDATES} candidate scores, got {}",
                        episode.id(),
                        row.len()
                    )));
                }
                Ok(row.iter().map(|&p| perplexity_to_weight(p)).collect())
            }
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Belief-independent inputs to ranking: per-candidate `q` and `delta`
/// against the belief after the context.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedEpisode {
    pub q: Vec<f64>,
    pub delta: Vec<f64>,
    pub truth_index: usize,
}

impl PreparedEpisode {
    pub fn new(q: Vec<f64>, delta: Vec<f64>, truth_index: usize) -> Result<Self> {
        if q.len() != delta.len() || truth_index >= q.len() {
            return Err(Error::InvalidArgument(
                "prepared episode shape mismatch".into(),
            ));
        }
        if q.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidArgument(
                "q scores must be positive and finite".into(),
            ));
        }
        Ok(PreparedEpisode {
            q,
            delta,
            truth_index,
        })
    }

    /// Rank of the truth under `q * exp(alpha * delta)`; ties go to the lower
    /// candidate index.
    pub fn rank(&self, alpha: f64) -> usize {
        rank_of(&self.modulated(alpha), self.truth_index)
    }

    pub fn modulated(&self, alpha: f64) -> Vec<f64> {
        self.q
            .iter()
            .zip(&self.delta)
            .map(|(q, d)| q * (alpha * d).exp())
            .collect()
    }
}

/// 1-based rank of `scores[target]` in a descending sort, ties by index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

/// Evolve the belief through the context and score every candidate.
pub fn prepare_episode(
    episode: &Episode,
    scorer: &Scorer,
    universe: &dyn UniverseModel,
) -> Result<PreparedEpisode> {
    let q = scorer.q_scores(episode)?;
    let mut belief = BeliefState::uniform(universe.universe_set().len())?;
    for u in episode.context() {
        belief = update_belief(&belief, &universe.classify(u))?;
    }
    let delta = episode
        .candidates()
        .into_iter()
        .map(|c| entropy_change(&belief, &update_belief(&belief, &universe.classify(c))?))
        .collect::<Result<Vec<_>>>()?;
    PreparedEpisode::new(q, delta, episode.truth_index())
}

pub fn prepare_episodes(
    exec: Exec,
    episodes: &[Episode],
    scorer: &Scorer,
    universe: &dyn UniverseModel,
) -> Result<Vec<PreparedEpisode>> {
    par::try_map(exec, episodes, |e| prepare_episode(e, scorer, universe))
}

/// Rank of the truth for one episode at one `alpha`.
pub fn rank_episode(
    episode: &Episode,
    scorer: &Scorer,
    universe: &dyn UniverseModel,
    alpha: f64,
) -> Result<usize> {
    Ok(prepare_episode(episode, scorer, universe)?.rank(alpha))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub alpha: f64,
    pub top3_accuracy: f64,
    pub mrr: f64,
    pub per_episode_ranks: Vec<usize>,
}

impl EvalResult {
    pub fn from_ranks(alpha: f64, ranks: Vec<usize>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::InvalidArgument("no episodes to evaluate".into()));
        }
        let n = ranks.len() as f64;
        let top3 = ranks.iter().filter(|&&r| r <= 3).count() as f64 / n;
        let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
        Ok(EvalResult {
            alpha,
            top3_accuracy: top3,
            mrr,
            per_episode_ranks: ranks,
        })
    }

    pub fn reciprocal_ranks(&self) -> Vec<f64> {
        self.per_episode_ranks
            .iter()
            .map(|&r| 1.0 / r as f64)
            .collect()
    }
}

pub fn evaluate_prepared(
    exec: Exec,
    prepared: &[PreparedEpisode],
    alpha: f64,
) -> Result<EvalResult> {
    EvalResult::from_ranks(alpha, par::map(exec, prepared, |p| p.rank(alpha)))
}

pub fn evaluate(
    exec: Exec,
    episodes: &[Episode],
    scorer: &Scorer,
    universe: &dyn UniverseModel,
    alpha: f64,
) -> Result<EvalResult> {
    evaluate_prepared(
        exec,
        &prepare_episodes(exec, episodes, scorer, universe)?,
        alpha,
    )
}

/// `steps` evenly spaced values from `lo` to `hi` inclusive.
pub fn alpha_grid(lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>> {
    if steps < 2 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "alpha grid needs steps >= 2 and lo < hi, got [{lo}, {hi}] x {steps}"
        )));
    }
    let last = (steps - 1) as f64;
    Ok((0..steps)
        .map(|i| {
            if i + 1 == steps {
                hi
            } else {
                lo + (hi - lo) * i as f64 / last
            }
        })
        .collect())
}

pub const DEFAULT_SWEEP: (f64, f64, usize) = (-2.0, 2.0, 100);

pub fn alpha_sweep_prepared(
    exec: Exec,
    prepared: &[PreparedEpisode],
    lo: f64,
    hi: f64,
    steps: usize,
) -> Result<Vec<EvalResult>> {
    let grid = alpha_grid(lo, hi, steps)?;
    par::try_map(exec, &grid, |&a| {
        evaluate_prepared(Exec::Sequential, prepared, a)
    })
}

pub fn alpha_sweep(
    exec: Exec,
    episodes: &[Episode],
    scorer: &Scorer,
    universe: &dyn UniverseModel,
    lo: f64,
    hi: f64,
    steps: usize,
) -> Result<Vec<EvalResult>> {
    alpha_sweep_prepared(
        exec,
        &prepare_episodes(exec, episodes, scorer, universe)?,
        lo,
        hi,
        steps,
    )
}

/// The alpha with the highest MRR; ties go to the smaller `|alpha|`, then to
/// the earlier result.
pub fn select_alpha(results: &[EvalResult]) -> Result<f64> {
    let mut best: Option<&EvalResult> = None;
    for r in results {
        let better = match best {
            None => true,
            Some(b) => r.mrr > b.mrr || (r.mrr == b.mrr && r.alpha.abs() < b.alpha.abs()),
        };
        if better {
            best = Some(r);
        }
    }
    best.map(|r| r.alpha)
        .ok_or_else(|| Error::InvalidArgument("no sweep results".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub alpha: f64,
    pub top3_accuracy: f64,
    pub mrr: f64,
}

impl From<&EvalResult> for MetricRow {
    fn from(r: &EvalResult) -> Self {
        MetricRow {
            alpha: r.alpha,
            top3_accuracy: r.top3_accuracy,
            mrr: r.mrr,
        }
    }
}

/// Test-set comparison of the modulated scorer at the selected alpha against
/// the same scorer at alpha = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub conversation_model: String,
    pub universe_model: String,
    pub episodes: usize,
    pub selected_alpha: f64,
    pub baseline: MetricRow,
    pub modulated: MetricRow,
    pub t_test: TTestResult,
    pub significant: bool,
    pub sweep: Vec<MetricRow>,
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

pub fn report(
    conversation_model: &str,
    universe_model: &str,
    test_result: &EvalResult,
    baseline: &EvalResult,
    sweep: &[EvalResult],
) -> Result<Report> {
    if test_result.per_episode_ranks.len() != baseline.per_episode_ranks.len() {
        return Err(Error::InvalidArgument(
            "test and baseline cover different episodes".into(),
        ));
    }
    let t = if test_result.per_episode_ranks.len() >= 2 {
        paired_t_test(
            &test_result.reciprocal_ranks(),
            &baseline.reciprocal_ranks(),
        )?
    } else {
        TTestResult {
            mean_diff: test_result.mrr - baseline.mrr,
            t: 0.0,
            dof: 0,
            p_value: 1.0,
        }
    };
    Ok(Report {
        version: REPORT_VERSION,
        conversation_model: conversation_model.to_owned(),
        universe_model: universe_model.to_owned(),
        episodes: test_result.per_episode_ranks.len(),
        selected_alpha: test_result.alpha,
        baseline: baseline.into(),
        modulated: test_result.into(),
        significant: t.p_value < SIGNIFICANCE_LEVEL,
        t_test: t,
        sweep: sweep.iter().map(MetricRow::from).collect(),
    })
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }

    /// Plain-text table with columns CM, UM, alpha, Top3Acc, MRR.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:<12} {:>8} {:>8} {:>8}",
            "CM", "UM", "alpha", "Top3Acc", "MRR"
        );
        let _ = writeln!(
            s,
            "{:<12} {:<12} {:>8.3} {:>8.3} {:>8.3}",
            self.conversation_model,
            "-",
            self.baseline.alpha,
            self.baseline.top3_accuracy,
            self.baseline.mrr
        );
        let star = if self.significant { "*" } else { "" };
        let _ = writeln!(
            s,
            "{:<12} {:<12} {:>8.3} {:>8.3} {:>8.3}{star}",
            self.conversation_model,
            self.universe_model,
            self.modulated.alpha,
            self.modulated.top3_accuracy,
            self.modulated.mrr
        );
        let _ = writeln!(
            s,
            "episodes = {}, paired t = {:.3}, p = {:.4}",
            self.episodes, self.t_test.t, self.t_test.p_value
        );
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WpsStats {
    pub mean: f64,
    pub std: f64,
    pub utterances: usize,
}

/// Words per sentence over every utterance: whitespace-separated token counts,
/// mean and population standard deviation.
pub fn wps_stats(dialogues: &[Dialogue]) -> Result<WpsStats> {
    wps_of(dialogues.iter().flat_map(|d| d.utterances()))
}

pub fn wps_of<'a>(utterances: impl IntoIterator<Item = &'a Utterance>) -> Result<WpsStats> {
    let counts: Vec<f64> = utterances
        .into_iter()
        .map(|u| u.text().split_whitespace().count() as f64)
        .collect();
    let (mean, std) = mean_std(&counts)?;
    Ok(WpsStats {
        mean,
        std,
        utterances: counts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::universe::{TableModel, UniverseDistribution, UniverseSet};

    fn utt(s: &str) -> Utterance {
        Utterance::new(s).unwrap()
    }

    fn file(prefix: &str, n: usize) -> Dialogue {
        let lines: Vec<String> = (0..n).map(|i| format!("{prefix} line {i}")).collect();
        Dialogue::from_lines(&lines).unwrap()
    }

    fn files() -> Vec<Dialogue> {
        vec![
            file("alpha", 6),
            file("beta", 5),
            file("gamma", 8),
            file("delta", 7),
        ]
    }

    #[test]
    fn short_files_are_skipped_and_lines_are_in_place() {
        let eps = build_episodes(Exec::Sequential, &files(), 1, Split::Test).unwrap();
        assert_eq!(eps.len(), 3);
        let e = &eps[0];
        assert_eq!(e.id(), "test-0");
        assert_eq!(e.context()[0].text(), "alpha line 0");
        assert_eq!(e.context()[4].text(), "alpha line 4");
        assert_eq!(e.truth().text(), "alpha line 5");
        assert!(e
            .distractors()
            .iter()
            .all(|d| !d.text().starts_with("alpha")));
        assert_eq!(e.candidates()[e.truth_index()], e.truth());
        let distinct: HashSet<_> = e.distractors().iter().map(|d| d.text()).collect();
        assert_eq!(distinct.len(), NUM_DISTRACTORS);
    }

    #[test]
    fn building_is_seeded_and_mode_independent() {
        let a = build_episodes(Exec::Sequential, &files(), 9, Split::Validation).unwrap();
        let b = build_episodes(Exec::Parallel, &files(), 9, Split::Validation).unwrap();
        assert_eq!(a, b);
        let c = build_episodes(Exec::Sequential, &files(), 10, Split::Validation).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_lines_is_an_error() {
        let f = vec![file("a", 6), file("b", 4)];
        assert!(matches!(
            build_episodes(Exec::Sequential, &f[..1], 0, Split::Test),
            Err(Error::NotEnoughCandidates { .. })
        ));
        // ten distinct lines exist but only three are outside the episode file
        assert!(build_episodes(Exec::Sequential, &f, 0, Split::Test).is_err());
    }

    #[test]
    fn distractors_skip_copies_of_the_truth() {
        let mut own: Vec<String> = (0..6).map(|i| format!("own {i}")).collect();
        own[5] = "shared".into();
        let mut a: Vec<String> = (0..5).map(|i| format!("a {i}")).collect();
        a[3] = "shared".into();
        let b: Vec<String> = (0..5).map(|i| format!("b {i}")).collect();
        let f: Vec<Dialogue> = [own, a, b]
            .iter()
            .map(|l| Dialogue::from_lines(l).unwrap())
            .collect();
        for seed in 0..20 {
            let e = &build_episodes(Exec::Sequential, &f, seed, Split::Test).unwrap()[0];
            assert!(e.distractors().iter().all(|d| d.text() != "shared"));
        }
    }

    #[test]
    fn episode_jsonl_round_trip() {
        let eps = build_episodes(Exec::Sequential, &files(), 3, Split::Test).unwrap();
        let text = episodes_to_jsonl(&eps);
        assert_eq!(parse_episodes(&text).unwrap(), eps);
        let line = text
            .lines()
            .next()
            .unwrap()
            .replace("\"version\":1", "\"version\":2");
        assert!(parse_episodes(&line).is_err());
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let mut obj = v.as_object().unwrap().clone();
        obj.remove("version");
        obj.remove("truth_index");
        let e: Episode = serde_json::from_value(serde_json::Value::Object(obj)).unwrap();
        assert_eq!(e.truth_index(), 0);
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of(&[0.1, 0.9, 0.5, 0.7, 0.2], 0), 5);
        assert_eq!(rank_of(&[0.5, 0.5, 0.5], 1), 2);
        let p = PreparedEpisode::new(vec![1.0; 10], vec![0.0; 10], 3).unwrap();
        assert_eq!(p.rank(0.0), 4);
        assert_eq!(p.rank(5.0), 4);
        let r = EvalResult::from_ranks(0.0, vec![4]).unwrap();
        assert_eq!(r.mrr, 0.25);
    }

    #[test]
    fn alpha_zero_ranks_by_q() {
        let p = PreparedEpisode::new(
            vec![0.3, 0.1, 0.9, 0.2, 0.5, 0.6, 0.05, 0.8, 0.7, 0.4],
            vec![-1.0, 2.0, -0.5, 0.1, 0.0, 0.3, 1.0, -2.0, 0.2, 0.4],
            4,
        )
        .unwrap();
        assert_eq!(p.modulated(0.0), p.q);
        assert_eq!(p.rank(0.0), rank_of(&p.q, 4));
    }

    #[test]
    fn topic_consistent_truth_wins_for_positive_alpha() {
        let set = UniverseSet::new(["A", "B"]).unwrap();
        let mut m = TableModel::new(set);
        for i in 0..5 {
            m.insert(
                format!("ctx {i}"),
                UniverseDistribution::new(vec![0.8, 0.2]).unwrap(),
            )
            .unwrap();
        }
        m.insert("truth", UniverseDistribution::new(vec![0.8, 0.2]).unwrap())
            .unwrap();
        let distractors: Vec<Utterance> = (0..9).map(|i| utt(&format!("d{i}"))).collect();
        for d in &distractors {
            m.insert(d.text(), UniverseDistribution::new(vec![0.2, 0.8]).unwrap())
                .unwrap();
        }
        let ctx = (0..5).map(|i| utt(&format!("ctx {i}"))).collect();
        let e = Episode::new("e", ctx, utt("truth"), distractors, 7).unwrap();
        let table =
            ExternalScoreTable::parse(&(0..10).map(|i| format!("e\t{i}\t5\n")).collect::<String>())
                .unwrap();
        let s = Scorer::External(table);
        assert_eq!(rank_episode(&e, &s, &m, 0.0).unwrap(), 8);
        assert_eq!(rank_episode(&e, &s, &m, 1.0).unwrap(), 1);
        assert_eq!(rank_episode(&e, &s, &m, -1.0).unwrap(), 10);
    }

    #[test]
    fn evaluate_extremes() {
        let best = EvalResult::from_ranks(0.0, vec![1; 7]).unwrap();
        assert_eq!((best.top3_accuracy, best.mrr), (1.0, 1.0));
        let worst = EvalResult::from_ranks(0.0, vec![10; 7]).unwrap();
        assert_eq!(worst.top3_accuracy, 0.0);
        assert!((worst.mrr - 0.1).abs() < 1e-15);
    }

    #[test]
    fn grid_examples() {
        let g = alpha_grid(-2.0, 2.0, 100).unwrap();
        assert_eq!(g.len(), 100);
        assert_eq!((g[0], g[99]), (-2.0, 2.0));
        assert_eq!(alpha_grid(0.5, 1.5, 2).unwrap(), vec![0.5, 1.5]);
        assert_eq!(alpha_grid(-2.0, 2.0, 101).unwrap()[50], 0.0);
        assert!(alpha_grid(1.0, 1.0, 5).is_err());
        assert!(alpha_grid(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn select_alpha_rules() {
        let r = |alpha, mrr| EvalResult {
            alpha,
            top3_accuracy: 0.0,
            mrr,
            per_episode_ranks: vec![1],
        };
        assert_eq!(select_alpha(&[r(0.7, 0.2)]).unwrap(), 0.7);
        assert_eq!(
            select_alpha(&[r(-0.5, 0.4), r(0.5, 0.4), r(1.0, 0.3)]).unwrap(),
            -0.5
        );
        assert_eq!(select_alpha(&[r(-1.0, 0.4), r(0.5, 0.4)]).unwrap(), 0.5);
        assert_eq!(
            select_alpha(&[r(-0.2, 0.1), r(0.3, 0.5), r(0.9, 0.2)]).unwrap(),
            0.3
        );
        assert!(select_alpha(&[]).is_err());
    }

    #[test]
    fn wps_examples() {
        let d = Dialogue::from_lines(&["a b", "a b c d"]).unwrap();
        let s = wps_stats(&[d]).unwrap();
        assert_eq!((s.mean, s.std), (3.0, 1.0));
        let one = wps_stats(&[Dialogue::from_lines(&["x y z"]).unwrap()]).unwrap();
        assert_eq!(one.std, 0.0);
    }

    #[test]
    fn report_table_and_json() {
        let base = EvalResult::from_ranks(0.0, vec![2, 3, 5, 1]).unwrap();
        let modl = EvalResult::from_ranks(0.5, vec![1, 1, 4, 1]).unwrap();
        let rep = report("unigram", "nb", &modl, &base, &[base.clone(), modl.clone()]).unwrap();
        assert_eq!(rep.sweep.len(), 2);
        assert!(rep.t_test.mean_diff > 0.0);
        let table = rep.table();
        assert!(table.starts_with("CM"));
        assert!(table.contains("Top3Acc") && table.contains("MRR"));
        let back: Report = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn random_scorer_is_keyed_by_episode() {
        let eps = build_episodes(Exec::Sequential, &files(), 3, Split::Test).unwrap();
        let s = Scorer::Random { seed: 4 };
        assert_eq!(s.q_scores(&eps[0]).unwrap(), s.q_scores(&eps[0]).unwrap());
        assert_ne!(s.q_scores(&eps[0]).unwrap(), s.q_scores(&eps[1]).unwrap());
        assert!(s
            .q_scores(&eps[0])
            .unwrap()
            .iter()
            .all(|&q| q > 0.0 && q <= 1.0));
    }

    #[test]
    fn external_scorer_requires_every_candidate() {
        let eps = build_episodes(Exec::Sequential, &files(), 3, Split::Test).unwrap();
        let t = ExternalScoreTable::parse("other\t0\t2\n").unwrap();
        assert!(matches!(
            Scorer::External(t).q_scores(&eps[0]),
            Err(Error::MissingScores(_))
        ));
    }
}

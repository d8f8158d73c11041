//! Modulated generation: candidates from a base conversation model are
//! re-weighted by `sigma = exp(alpha * delta)` and selected either greedily or
//! by rejection sampling against the envelope `M`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arc::{entropy_change, score, update_belief, BeliefState, NarrativeArc, ShapingConfig};
use crate::conversation::{Candidate, ConversationModel};
use crate::corpus::{Dialogue, Utterance};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::universe::UniverseModel;

pub const TRANSCRIPT_VERSION: u32 = 1;

/// Candidates drawn per greedy turn unless told otherwise.
pub const DEFAULT_K: usize = 32;

/// A candidate with its hypothetical effect on the belief.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub candidate: Candidate,
    pub delta: f64,
    pub sigma: f64,
    pub q_tilde: f64,
    /// Belief after absorbing this candidate.
    pub posterior: BeliefState,
}

/// How the next line is chosen from the base model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Highest `q * sigma` among `k` drawn candidates.
    #[default]
    Greedy,
    /// One draw at a time from `q`, accepted with probability `sigma / M`.
    Rejection,
    /// Highest `q` among `k` drawn candidates; `sigma` is ignored.
    Base,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Greedy => "greedy",
            Method::Rejection => "rejection",
            Method::Base => "base",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Method::Greedy),
            "rejection" => Ok(Method::Rejection),
            "base" => Ok(Method::Base),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

/// Score every candidate against `belief` without changing it.
pub fn score_candidates(
    exec: Exec,
    belief: &BeliefState,
    universe: &dyn UniverseModel,
    config: &ShapingConfig,
    candidates: &[Candidate],
) -> Result<Vec<ScoredCandidate>> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    par::try_map(exec, candidates, |c| score_one(belief, universe, config, c))
}

fn score_one(
    belief: &BeliefState,
    universe: &dyn UniverseModel,
    config: &ShapingConfig,
    c: &Candidate,
) -> Result<ScoredCandidate> {
    let posterior = update_belief(belief, &universe.classify(&c.utterance))?;
    let delta = entropy_change(belief, &posterior)?;
    let sigma = score(delta, config);
    Ok(ScoredCandidate {
        candidate: c.clone(),
        delta,
        sigma,
        q_tilde: c.q_score * sigma,
        posterior,
    })
}

/// Index of the first maximum of `key` over `items`.
fn first_argmax<T>(items: &[T], key: impl Fn(&T) -> f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, it) in items.iter().enumerate() {
        let k = key(it);
        if best.is_none_or(|(_, b)| k > b) {
            best = Some((i, k));
        }
    }
    best.map(|(i, _)| i)
}

/// Argmax of `q_tilde`; exact ties keep the earlier candidate.
pub fn greedy_select(scored: &[ScoredCandidate]) -> Result<&ScoredCandidate> {
    first_argmax(scored, |s| s.q_tilde)
        .map(|i| &scored[i])
        .ok_or(Error::NoCandidates)
}

/// Argmax of the base weight `q`, ignoring the universe score.
pub fn base_select(candidates: &[Candidate]) -> Result<&Candidate> {
    first_argmax(candidates, |c| c.q_score)
        .map(|i| &candidates[i])
        .ok_or(Error::NoCandidates)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionOutcome {
    pub chosen: ScoredCandidate,
    /// `false` when the sample budget ran out and the best rejected draw was used.
    pub accepted: bool,
    pub draws: usize,
}

/// Generic rejection loop: draw, score, accept with probability `sigma / M`.
/// After `max_samples` rejections the draw with the highest `sigma` is returned.
pub fn rejection_sample<R, T, D, S>(
    rng: &mut R,
    max_score: f64,
    max_samples: usize,
    mut draw: D,
    sigma_of: S,
) -> Result<(T, bool, usize)>
where
    R: Rng + ?Sized,
    D: FnMut(&mut R) -> Result<T>,
    S: Fn(&T) -> f64,
{
    let mut best: Option<(T, f64)> = None;
    for n in 1..=max_samples {
        let x = draw(rng)?;
        let r: f64 = rng.random();
        let s = sigma_of(&x);
        if r <= s / max_score {
            return Ok((x, true, n));
        }
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((x, s));
        }
    }
    let (x, _) = best.ok_or_else(|| Error::InvalidArgument("max samples must be >= 1".into()))?;
    Ok((x, false, max_samples))
}

/// Select the next line by rejection sampling from `q` modulated by `sigma`.
pub fn rejection_select(
    rng: &mut dyn RngCore,
    belief: &BeliefState,
    history: &[Utterance],
    universe: &dyn UniverseModel,
    conversation: &dyn ConversationModel,
    config: &ShapingConfig,
) -> Result<RejectionOutcome> {
    let (chosen, accepted, draws) = rejection_sample(
        rng,
        config.max_score,
        config.max_samples,
        |rng| {
            let c = conversation.sample(history, rng)?;
            score_one(belief, universe, config, &c)
        },
        |s| s.sigma,
    )?;
    Ok(RejectionOutcome {
        chosen,
        accepted,
        draws,
    })
}

/// Independent rejection selections from one fixed belief, fanned out over
/// `exec`. Run `i` uses ChaCha stream `i` of `seed`, so the output does not
/// depend on the execution mode.
#[allow(clippy::too_many_arguments)]
pub fn rejection_batch(
    exec: Exec,
    runs: usize,
    seed: u64,
    belief: &BeliefState,
    history: &[Utterance],
    universe: &dyn UniverseModel,
    conversation: &dyn ConversationModel,
    config: &ShapingConfig,
) -> Result<Vec<RejectionOutcome>> {
    const CHUNK: usize = 1024;
    let chunks = runs.div_ceil(CHUNK);
    let per_chunk = par::map_range(exec, chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let n = CHUNK.min(runs - c * CHUNK);
        (0..n)
            .map(|_| rejection_select(&mut rng, belief, history, universe, conversation, config))
            .collect::<Result<Vec<_>>>()
    });
    let mut out = Vec::with_capacity(runs);
    for chunk in per_chunk {
        out.extend(chunk?);
    }
    Ok(out)
}

/// Where a transcript line came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineSource {
    Seed,
    Human,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptLine {
    pub text: String,
    pub source: LineSource,
    pub delta: f64,
    /// Present only for lines the system selected.
    pub sigma: Option<f64>,
}

/// A single-writer dialogue in progress: the lines so far, the belief they
/// induce, the shaping configuration and a private RNG.
pub struct GenerationSession {
    universe: Arc<dyn UniverseModel>,
    conversation: Arc<dyn ConversationModel>,
    config: ShapingConfig,
    seed: u64,
    rng: ChaCha8Rng,
    exec: Exec,
    dialogue: Vec<Utterance>,
    lines: Vec<TranscriptLine>,
    arc: NarrativeArc,
}

impl fmt::Debug for GenerationSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GenerationSession")
            .field("config", &self.config)
            .field("seed", &self.seed)
            .field("lines", &self.lines.len())
            .finish_non_exhaustive()
    }
}

/// One committed system turn.
#[derive(Debug, Clone)]
pub struct Turn {
    pub chosen: ScoredCandidate,
    /// Every candidate considered (greedy and base selection only).
    pub considered: Vec<ScoredCandidate>,
    pub accepted: bool,
    pub draws: usize,
}

impl GenerationSession {
    pub fn new(
        universe: Arc<dyn UniverseModel>,
        conversation: Arc<dyn ConversationModel>,
        config: ShapingConfig,
        seed: u64,
    ) -> Self {
        let arc = NarrativeArc::new(universe.universe_set().clone());
        GenerationSession {
            universe,
            conversation,
            config,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            exec: Exec::default(),
            dialogue: Vec::new(),
            lines: Vec::new(),
            arc,
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &ShapingConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.dialogue
    }

    pub fn lines(&self) -> &[TranscriptLine] {
        &self.lines
    }

    pub fn arc(&self) -> &NarrativeArc {
        &self.arc
    }

    pub fn belief(&self) -> BeliefState {
        self.arc.belief()
    }

    pub fn universe(&self) -> &dyn UniverseModel {
        self.universe.as_ref()
    }

    /// Absorb a line the system did not choose (seed or human input).
    pub fn absorb(&mut self, utterance: Utterance, source: LineSource) -> Result<()> {
        let delta = self.arc.absorb(self.universe.as_ref(), &utterance)?.delta;
        self.lines.push(TranscriptLine {
            text: utterance.text().to_owned(),
            source,
            delta,
            sigma: None,
        });
        self.dialogue.push(utterance);
        Ok(())
    }

    /// Commit a scored candidate as the next generated line.
    pub fn commit(&mut self, scored: &ScoredCandidate) -> Result<()> {
        let point = self
            .arc
            .push(&scored.candidate.utterance, &scored.posterior)?;
        self.lines.push(TranscriptLine {
            text: scored.candidate.utterance.text().to_owned(),
            source: LineSource::Generated,
            delta: point.delta,
            sigma: Some(scored.sigma),
        });
        self.dialogue.push(scored.candidate.utterance.clone());
        Ok(())
    }

    /// Score candidates against the current belief. Does not mutate the session.
    pub fn score_candidates(&self, candidates: &[Candidate]) -> Result<Vec<ScoredCandidate>> {
        score_candidates(
            self.exec,
            &self.belief(),
            self.universe.as_ref(),
            &self.config,
            candidates,
        )
    }

    /// Choose the next line with `method` (drawing `k` candidates for greedy
    /// and base selection) without committing it.
    pub fn propose(&mut self, method: Method, k: usize) -> Result<Turn> {
        let belief = self.belief();
        match method {
            Method::Greedy | Method::Base => {
                let cands = self
                    .conversation
                    .candidates(&self.dialogue, k, &mut self.rng)?;
                if cands.is_empty() {
                    return Err(Error::NoCandidates);
                }
                let considered = self.score_candidates(&cands)?;
                let chosen = if method == Method::Greedy {
                    greedy_select(&considered)?.clone()
                } else {
                    let c = base_select(&cands)?;
                    let i = cands
                        .iter()
                        .position(|x| std::ptr::eq(x, c))
                        .expect("from slice");
                    considered[i].clone()
                };
                Ok(Turn {
                    chosen,
                    considered,
                    accepted: true,
                    draws: k,
                })
            }
            Method::Rejection => {
                let out = rejection_select(
                    &mut self.rng,
                    &belief,
                    &self.dialogue,
                    self.universe.as_ref(),
                    self.conversation.as_ref(),
                    &self.config,
                )?;
                Ok(Turn {
                    chosen: out.chosen,
                    considered: Vec::new(),
                    accepted: out.accepted,
                    draws: out.draws,
                })
            }
        }
    }

    /// Propose and commit the next system line.
    pub fn step(&mut self, method: Method, k: usize) -> Result<Turn> {
        let turn = self.propose(method, k)?;
        self.commit(&turn.chosen)?;
        Ok(turn)
    }

    pub fn transcript(&self, method: Method) -> Transcript {
        Transcript {
            version: TRANSCRIPT_VERSION,
            config: TranscriptConfig {
                alpha: self.config.alpha,
                max_score: self.config.max_score,
                max_samples: self.config.max_samples,
                method,
                seed: self.seed,
            },
            lines: self.lines.clone(),
            arc: self.arc.to_json_value(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptConfig {
    pub alpha: f64,
    #[serde(rename = "M")]
    pub max_score: f64,
    #[serde(rename = "S")]
    pub max_samples: usize,
    pub method: Method,
    pub seed: u64,
}

/// Serialized generation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transcript {
    pub version: u32,
    pub config: TranscriptConfig,
    pub lines: Vec<TranscriptLine>,
    pub arc: serde_json::Value,
}

impl Transcript {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serialization is infallible")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    /// Total dialogue length, seeds included.
    pub n: usize,
    pub method: Method,
    pub k: usize,
    pub seed: u64,
}

/// Result of [`generate_dialogue`].
#[derive(Debug)]
pub struct Generation {
    pub dialogue: Dialogue,
    pub arc: NarrativeArc,
    pub transcript: Transcript,
}

/// Absorb `seed_lines`, then generate until the dialogue has `opts.n` lines.
pub fn generate_dialogue(
    universe: Arc<dyn UniverseModel>,
    conversation: Arc<dyn ConversationModel>,
    seed_lines: &[Utterance],
    config: ShapingConfig,
    opts: GenerateOptions,
) -> Result<Generation> {
    generate_dialogue_with(
        Exec::default(),
        universe,
        conversation,
        seed_lines,
        config,
        opts,
    )
}

pub fn generate_dialogue_with(
    exec: Exec,
    universe: Arc<dyn UniverseModel>,
    conversation: Arc<dyn ConversationModel>,
    seed_lines: &[Utterance],
    config: ShapingConfig,
    opts: GenerateOptions,
) -> Result<Generation> {
    if seed_lines.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one seed line is required".into(),
        ));
    }
    if opts.n < seed_lines.len() {
        return Err(Error::InvalidArgument(format!(
            "n = {} is less than the {} seed lines",
            opts.n,
            seed_lines.len()
        )));
    }
    let mut session =
        GenerationSession::new(universe, conversation, config, opts.seed).with_exec(exec);
    for s in seed_lines {
        session.absorb(s.clone(), LineSource::Seed)?;
    }
    while session.utterances().len() < opts.n {
        session.step(opts.method, opts.k)?;
    }
    let transcript = session.transcript(opts.method);
    Ok(Generation {
        dialogue: Dialogue::new(session.utterances().to_vec(), None)?,
        arc: session.arc().clone(),
        transcript,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arc::compute_arc;
    use crate::conversation::RandomModel;
    use crate::universe::{TableModel, UniverseDistribution, UniverseSet};

    fn dist(p: &[f64]) -> UniverseDistribution {
        UniverseDistribution::new(p.to_vec()).unwrap()
    }

    fn utt(s: &str) -> Utterance {
        Utterance::new(s).unwrap()
    }

    fn toy() -> TableModel {
        let mut m = TableModel::new(UniverseSet::new(["A", "B"]).unwrap());
        m.insert("revealing line", dist(&[0.9, 0.1])).unwrap();
        m.insert("neutral line", dist(&[0.5, 0.5])).unwrap();
        m
    }

    fn cands(texts: &[&str]) -> Vec<Candidate> {
        texts
            .iter()
            .map(|t| Candidate::new(utt(t), 1.0).unwrap())
            .collect()
    }

    #[test]
    fn alpha_zero_is_pass_through() {
        let m = toy();
        let b = BeliefState::uniform(2).unwrap();
        let c = ShapingConfig::with_defaults(0.0, 2).unwrap();
        assert_eq!(c.max_score, 1.0);
        let mut cs = cands(&["revealing line", "neutral line", "other"]);
        cs[1].q_score = 3.0;
        let s = score_candidates(Exec::Sequential, &b, &m, &c, &cs).unwrap();
        assert!(s
            .iter()
            .all(|s| s.sigma == 1.0 && s.q_tilde == s.candidate.q_score));
        assert_eq!(
            greedy_select(&s).unwrap().candidate.utterance.text(),
            "neutral line"
        );
    }

    #[test]
    fn revealing_candidate_wins_for_positive_alpha() {
        let m = toy();
        let b = BeliefState::uniform(2).unwrap();
        let cs = cands(&["neutral line", "revealing line"]);
        let up = ShapingConfig::new(1.0, 10.0, 1).unwrap();
        let s = score_candidates(Exec::Sequential, &b, &m, &up, &cs).unwrap();
        // delta = ln 2 - H(0.9, 0.1) for the revealing line, 0 for the neutral one.
        let h = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((s[1].delta - (2f64.ln() - h)).abs() < 1e-12);
        assert_eq!(s[0].delta, 0.0);
        assert!(s[1].q_tilde > s[0].q_tilde);
        let down = ShapingConfig::new(-1.0, 10.0, 1).unwrap();
        let s = score_candidates(Exec::Sequential, &b, &m, &down, &cs).unwrap();
        assert!(s[1].q_tilde < s[0].q_tilde);
    }

    #[test]
    fn scoring_has_no_side_effects() {
        let m: Arc<dyn UniverseModel> = Arc::new(toy());
        let conv: Arc<dyn ConversationModel> =
            Arc::new(RandomModel::new(vec![utt("neutral line")]).unwrap());
        let mut s = GenerationSession::new(m, conv, ShapingConfig::new(2.0, 4.0, 5).unwrap(), 1);
        s.absorb(utt("revealing line"), LineSource::Seed).unwrap();
        let cs = cands(&["revealing line", "neutral line"]);
        let a = s.score_candidates(&cs).unwrap();
        let b = s.score_candidates(&cs).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.belief().step(), 1);
    }

    #[test]
    fn greedy_ties_keep_input_order() {
        let m = toy();
        let b = BeliefState::uniform(2).unwrap();
        let c = ShapingConfig::new(0.0, 1.0, 1).unwrap();
        let s =
            score_candidates(Exec::Sequential, &b, &m, &c, &cands(&["x one", "x two"])).unwrap();
        assert_eq!(
            greedy_select(&s).unwrap().candidate.utterance.text(),
            "x one"
        );
        let single = &s[..1];
        assert_eq!(greedy_select(single).unwrap(), &s[0]);
        assert!(greedy_select(&[]).is_err());
    }

    #[test]
    fn rejection_fallback_returns_best_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // sigma / M is zero so nothing is ever accepted
        let mut i = 0;
        let (x, accepted, draws) = rejection_sample(
            &mut rng,
            1.0,
            3,
            |_| {
                i += 1;
                Ok(i)
            },
            |&x| if x == 2 { 1e-300 } else { 0.0 },
        )
        .unwrap();
        assert!(!accepted);
        assert_eq!(draws, 3);
        assert_eq!(x, 2);

        let (_, accepted, draws) = rejection_sample(&mut rng, 1.0, 1, |_| Ok(()), |_| 0.0).unwrap();
        assert!(!accepted && draws == 1);
    }

    #[test]
    fn rejection_with_sigma_at_envelope_accepts_first_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let (_, accepted, draws) =
                rejection_sample(&mut rng, 4.0, 10, |_| Ok(()), |_| 4.0).unwrap();
            assert!(accepted && draws == 1);
        }
    }

    #[test]
    fn session_stays_consistent_with_compute_arc() {
        let pool: Vec<_> = ["revealing line", "neutral line", "another neutral"]
            .iter()
            .map(|s| utt(s))
            .collect();
        let m: Arc<dyn UniverseModel> = Arc::new(toy());
        let conv: Arc<dyn ConversationModel> = Arc::new(RandomModel::new(pool).unwrap());
        let mut s = GenerationSession::new(
            m.clone(),
            conv,
            ShapingConfig::with_defaults(3.0, 2).unwrap(),
            11,
        );
        s.absorb(utt("neutral line"), LineSource::Seed).unwrap();
        for method in [
            Method::Greedy,
            Method::Rejection,
            Method::Base,
            Method::Greedy,
        ] {
            s.step(method, 2).unwrap();
            let d = Dialogue::new(s.utterances().to_vec(), None).unwrap();
            let arc = compute_arc(&d, m.as_ref()).unwrap();
            for (a, b) in arc.last().probs.probs().iter().zip(s.belief().probs()) {
                assert!((a - b).abs() < 1e-9);
            }
            assert_eq!(s.belief().step(), s.utterances().len());
        }
    }

    #[test]
    fn generate_argument_checks() {
        let m: Arc<dyn UniverseModel> = Arc::new(toy());
        let conv: Arc<dyn ConversationModel> =
            Arc::new(RandomModel::new(vec![utt("neutral line")]).unwrap());
        let cfg = ShapingConfig::with_defaults(1.0, 2).unwrap();
        let opts = GenerateOptions {
            n: 1,
            method: Method::Greedy,
            k: 4,
            seed: 0,
        };
        let seeds = [utt("revealing line"), utt("neutral line")];
        assert!(generate_dialogue(m.clone(), conv.clone(), &seeds, cfg, opts).is_err());
        assert!(generate_dialogue(m.clone(), conv.clone(), &[], cfg, opts).is_err());

        let g = generate_dialogue(
            m.clone(),
            conv,
            &seeds,
            cfg,
            GenerateOptions { n: 2, ..opts },
        )
        .unwrap();
        assert_eq!(g.dialogue.utterances(), &seeds);
        assert_eq!(g.arc, compute_arc(&g.dialogue, m.as_ref()).unwrap());
    }

    #[test]
    fn method_parsing() {
        assert_eq!("rejection".parse::<Method>().unwrap(), Method::Rejection);
        assert!("nope".parse::<Method>().is_err());
        assert_eq!(Method::Greedy.to_string(), "greedy");
    }
}

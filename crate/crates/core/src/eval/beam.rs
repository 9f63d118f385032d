//! Beam search over the incremental decoder.

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{DecoderCache, EncodedSource, Inference};

/// One prefix kept on the beam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    /// Generated tokens; ends with EOS when finished.
    pub tokens: Vec<usize>,
    /// Cumulative log-probability.
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Cumulative log-probability divided by the generated token count.
    pub fn normalized(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }

    /// Tokens without the terminal EOS.
    pub fn output(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) if self.finished => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BeamResult {
    pub best: BeamHypothesis,
    /// Finished hypotheses followed by the live beam at termination.
    pub final_beam: Vec<BeamHypothesis>,
}

impl BeamResult {
    /// No hypothesis reached EOS within the length limit.
    pub fn unfinished(&self) -> bool {
        !self.best.finished
    }
}

/// Output length limit for a source of `source_len` tokens.
pub fn max_output_len(source_len: usize) -> usize {
    2 * source_len + 8
}

struct Live {
    hyp: BeamHypothesis,
    cache: DecoderCache,
    last: usize,
}

/// Keeps the `beam` best prefixes by cumulative log-probability; a prefix
/// that emits EOS leaves the beam as finished. Log-probabilities only fall,
/// so a live prefix can finish no better than `log_prob / max_len`; the
/// search stops once no live prefix can beat the best finished one, the
/// beam empties, or `max_len` tokens were generated. Returns the finished
/// hypothesis with the best length-normalized score, or the best live one
/// flagged unfinished.
pub fn beam_search(inf: &Inference<'_>, src: &EncodedSource, beam: usize, max_len: usize) -> Result<BeamResult> {
    if beam == 0 {
        return Err(Error::invalid("beam_search", "beam must be at least 1"));
    }
    let max_len = max_len.min(inf.params().config().max_len);
    let mut live = vec![Live {
        hyp: BeamHypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
        cache: inf.start(),
        last: BOS,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        let mut dists = Vec::with_capacity(live.len());
        for (i, l) in live.iter_mut().enumerate() {
            let lp = inf.step(src, &mut l.cache, l.last)?;
            for (tok, &p) in lp.iter().enumerate() {
                candidates.push((l.hyp.log_prob + p, i, tok));
            }
            dists.push(lp);
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam);
        for &(score, i, tok) in candidates.iter().take(beam) {
            let mut tokens = live[i].hyp.tokens.clone();
            tokens.push(tok);
            if tok == EOS {
                finished.push(BeamHypothesis {
                    tokens,
                    log_prob: score,
                    finished: true,
                });
            } else {
                next.push(Live {
                    hyp: BeamHypothesis {
                        tokens,
                        log_prob: score,
                        finished: false,
                    },
                    cache: live[i].cache.clone(),
                    last: tok,
                });
            }
        }
        live = next;
        let best_finished = finished.iter().map(BeamHypothesis::normalized).max_by(f64::total_cmp);
        let best_possible = live.iter().map(|l| l.hyp.log_prob / max_len as f64).max_by(f64::total_cmp);
        match (best_finished, best_possible) {
            (_, None) => break,
            (Some(f), Some(p)) if f >= p => break,
            _ => {}
        }
    }
    let pick = |hyps: &[BeamHypothesis]| {
        hyps.iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.normalized().total_cmp(&b.normalized()).then(j.cmp(i)))
            .map(|(_, h)| h.clone())
    };
    let live_hyps: Vec<BeamHypothesis> = live.into_iter().map(|l| l.hyp).collect();
    let best = pick(&finished)
        .or_else(|| pick(&live_hyps))
        .ok_or_else(|| Error::invalid("beam_search", "empty beam"))?;
    finished.extend(live_hyps);
    Ok(BeamResult {
        best,
        final_beam: finished,
    })
}

/// Argmax decoding: the next token is always the most probable one.
pub fn greedy_decode(inf: &Inference<'_>, src: &EncodedSource, max_len: usize) -> Result<BeamHypothesis> {
    let max_len = max_len.min(inf.params().config().max_len);
    let mut cache = inf.start();
    let mut hyp = BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    let mut last = BOS;
    for _ in 0..max_len {
        let lp = inf.step(src, &mut cache, last)?;
        let (tok, p) = lp
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
        hyp.tokens.push(tok);
        hyp.log_prob += p;
        if tok == EOS {
            hyp.finished = true;
            break;
        }
        last = tok;
    }
    Ok(hyp)
}

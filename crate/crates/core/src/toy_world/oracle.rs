use serde::{Deserialize, Serialize};

use crate::toy_world::render::{dist, FrameClass, Renderer, SpeechFrames};

/// One transcribed frame group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Heard {
    Token(usize),
    /// Frames that fall outside every decision region, or a group whose frames
    /// disagree on the phoneme.
    Failure,
}

/// Output of the exact transcriber.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub heard: Vec<Heard>,
    /// Majority vote over frames; `None` when no frame could be classified.
    pub dialect: Option<usize>,
    pub emotion: Option<usize>,
    /// Nearest speaker offset to the mean residual. Only meaningful on
    /// unquantized frames.
    pub speaker: Option<usize>,
}

impl Transcript {
    /// Successfully transcribed tokens, failures dropped.
    pub fn text(&self) -> Vec<usize> {
        self.heard
            .iter()
            .filter_map(|h| match h {
                Heard::Token(t) => Some(*t),
                Heard::Failure => None,
            })
            .collect()
    }

    pub fn failures(&self) -> usize {
        self.heard.iter().filter(|h| matches!(h, Heard::Failure)).count()
    }
}

struct Decoder {
    classes: Vec<FrameClass>,
    centers: Vec<Vec<f32>>,
    radius: f32,
}

impl Decoder {
    fn new(r: &Renderer) -> Self {
        let classes = r.classes();
        let centers = classes.iter().map(|&c| r.center(c)).collect();
        Self {
            classes,
            centers,
            radius: r.min_center_distance() / 2.0,
        }
    }

    fn classify(&self, x: &[f32]) -> Option<usize> {
        let mut best = (0, f32::INFINITY);
        for (i, c) in self.centers.iter().enumerate() {
            let d = dist(c, x);
            if d < best.1 {
                best = (i, d);
            }
        }
        (best.1 < self.radius).then_some(best.0)
    }
}

fn majority(votes: &[usize], n: usize) -> Option<usize> {
    if votes.is_empty() {
        return None;
    }
    let mut counts = vec![0usize; n];
    for &v in votes {
        counts[v] += 1;
    }
    // Ties resolve to the lowest id.
    let top = *counts.iter().max().expect("n > 0");
    counts.iter().position(|&c| c == top)
}

/// Inverts rendering. Each frame is matched to the class center within half
/// the minimum center distance; a token is read when `frames_per_token`
/// consecutive frames carry slots `0, 1, …` of one phoneme. Anything else
/// yields a [`Heard::Failure`] for that frame and scanning resumes at the next
/// frame.
pub fn oracle_transcribe(renderer: &Renderer, frames: &SpeechFrames) -> Transcript {
    let cfg = renderer.config();
    let dec = Decoder::new(renderer);
    let labels: Vec<Option<usize>> = (0..frames.len()).map(|i| dec.classify(frames.frame(i))).collect();
    let r = cfg.frames_per_token;
    let mut heard = Vec::new();
    let mut dialects = Vec::new();
    let mut emotions = Vec::new();
    let mut residual = vec![0f64; cfg.frame_dim];
    let mut matched = 0usize;
    let mut i = 0;
    while i < labels.len() {
        let group = (i + r <= labels.len())
            .then(|| {
                let first = dec.classes[labels[i]?];
                (0..r)
                    .all(|s| {
                        labels[i + s].is_some_and(|l| {
                            let c = dec.classes[l];
                            c.slot == s && c.phoneme == first.phoneme
                        })
                    })
                    .then_some(first.phoneme)
            })
            .flatten();
        match group {
            Some(p) => {
                for s in 0..r {
                    let l = labels[i + s].expect("checked");
                    let c = dec.classes[l];
                    if s % 2 == 0 {
                        dialects.push(c.style);
                    } else {
                        emotions.push(c.style);
                    }
                    for (acc, (x, m)) in residual.iter_mut().zip(frames.frame(i + s).iter().zip(&dec.centers[l])) {
                        *acc += (x - m) as f64;
                    }
                    matched += 1;
                }
                heard.push(Heard::Token(p));
                i += r;
            }
            None => {
                heard.push(Heard::Failure);
                i += 1;
            }
        }
    }
    let speaker = (matched > 0).then(|| {
        let mean: Vec<f32> = residual.iter().map(|v| (v / matched as f64) as f32).collect();
        (0..cfg.speakers)
            .min_by(|&a, &b| {
                dist(&mean, renderer.speaker_offset(a)).total_cmp(&dist(&mean, renderer.speaker_offset(b)))
            })
            .expect("speakers > 0")
    });
    Transcript {
        heard,
        dialect: majority(&dialects, cfg.dialects),
        emotion: majority(&emotions, cfg.emotions),
        speaker,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_world::{gen_corpus, WorldConfig};

    #[test]
    fn inverts_rendering() {
        let cfg = WorldConfig::default();
        let r = Renderer::new(&cfg).unwrap();
        for u in gen_corpus(5, &cfg, 200).unwrap() {
            let t = oracle_transcribe(&r, &r.render(&u).unwrap());
            assert_eq!(t.text(), u.text);
            assert_eq!(t.failures(), 0);
            assert_eq!((t.dialect, t.emotion, t.speaker), (Some(u.dialect), Some(u.emotion), Some(u.speaker)));
        }
    }

    #[test]
    fn zero_frames_give_empty_text() {
        let r = Renderer::new(&WorldConfig::default()).unwrap();
        let t = oracle_transcribe(&r, &SpeechFrames::empty(16));
        assert!(t.heard.is_empty() && t.dialect.is_none() && t.speaker.is_none());
    }

    #[test]
    fn garbage_frames_are_failures() {
        let r = Renderer::new(&WorldConfig::default()).unwrap();
        let f = SpeechFrames::new(crate::numerics::Tensor::full(&[3, 16], 3.9)).unwrap();
        let t = oracle_transcribe(&r, &f);
        assert_eq!(t.failures(), 3);
        assert!(t.text().is_empty());
    }
}

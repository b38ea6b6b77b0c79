use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::numerics::Tensor;
use crate::toy_world::render::{dist, Renderer, SpeechFrames};
use crate::toy_world::{gen_corpus, WorldConfig};

pub const CODEBOOK_VERSION: u32 = 1;
pub const CODEBOOK_SEED: u64 = 0xc0de_b00c_0000_0001;
/// Utterances rendered to fit the shipped codebook.
pub const CODEBOOK_CORPUS: usize = 2000;
pub const KMEANS_ITERS: usize = 40;

static SHIPPED_BYTES: &[u8] = include_bytes!("../../assets/codebook_v1.bin");

/// Speech token ids terminated by exactly one end-of-speech id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TokenRecord", into = "TokenRecord")]
pub struct SpeechTokens {
    ids: Vec<usize>,
    eos: usize,
}

#[derive(Serialize, Deserialize)]
struct TokenRecord {
    ids: Vec<usize>,
    eos: usize,
}

impl TryFrom<TokenRecord> for SpeechTokens {
    type Error = Error;
    fn try_from(r: TokenRecord) -> Result<Self> {
        SpeechTokens::new(r.ids, r.eos)
    }
}

impl From<SpeechTokens> for TokenRecord {
    fn from(t: SpeechTokens) -> Self {
        TokenRecord { ids: t.ids, eos: t.eos }
    }
}

impl SpeechTokens {
    /// `ids` must end with `eos` and contain it nowhere else.
    pub fn new(ids: Vec<usize>, eos: usize) -> Result<Self> {
        match ids.iter().position(|&t| t == eos) {
            Some(p) if p + 1 == ids.len() => {}
            _ => return Err(Error::Format("speech tokens need exactly one EOS, at the end".into())),
        }
        if let Some(&bad) = ids.iter().find(|&&t| t > eos) {
            return Err(Error::Format(format!("speech token {bad} outside vocabulary")));
        }
        Ok(Self { ids, eos })
    }

    /// Appends EOS to a body that must not contain it.
    pub fn from_body(mut body: Vec<usize>, eos: usize) -> Result<Self> {
        body.push(eos);
        Self::new(body, eos)
    }

    /// All ids including the trailing EOS.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Ids before EOS.
    pub fn body(&self) -> &[usize] {
        &self.ids[..self.ids.len() - 1]
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    /// Length including EOS.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Fixed set of centroids; centroid `i` is speech token `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    centroids: Tensor<f32>,
}

/// Separation of the decision regions against the codec's distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MarginReport {
    /// Smallest distance between two distinct class centers.
    pub min_center_distance: f32,
    /// Largest frame-to-nearest-centroid distance over the measured frames.
    pub max_quant_radius: f32,
    /// Largest distance of a rendered frame from its class center.
    pub max_spread: f32,
    /// Largest distance from a centroid to the nearest class center.
    pub max_centroid_offset: f32,
    pub frames_measured: usize,
}

impl MarginReport {
    /// `D > 2r`: distinct templates cannot be confused by quantization alone.
    pub fn radius_margin_holds(&self) -> bool {
        self.min_center_distance > 2.0 * self.max_quant_radius
    }

    /// Every centroid lies strictly inside one decision region, so decoding any
    /// token is transcribed without failure.
    pub fn centroid_margin_holds(&self) -> bool {
        self.min_center_distance > 2.0 * self.max_centroid_offset
    }

    pub fn holds(&self) -> bool {
        self.radius_margin_holds() && self.centroid_margin_holds()
    }
}

impl Codebook {
    pub fn new(centroids: Tensor<f32>) -> Result<Self> {
        if centroids.rank() != 2 || centroids.rows() == 0 {
            return arg_err("codebook needs at least one centroid row");
        }
        Ok(Self { centroids })
    }

    /// The versioned codebook compiled into the crate.
    pub fn shipped() -> Result<&'static Codebook> {
        static CELL: OnceLock<std::result::Result<Codebook, String>> = OnceLock::new();
        CELL.get_or_init(|| {
            if SHIPPED_BYTES.is_empty() {
                return Err("shipped codebook asset is empty; run `cargo run -p duotts --example build_codebook`".into());
            }
            Codebook::from_bytes(SHIPPED_BYTES).map_err(|e| e.to_string())
        })
        .as_ref()
        .map_err(|e| Error::Dependency(e.clone()))
    }

    /// Fits the codebook for `cfg` from scratch: k-means over the frames of a
    /// fixed corpus.
    pub fn fit(cfg: &WorldConfig) -> Result<Self> {
        let renderer = Renderer::new(cfg)?;
        let corpus = gen_corpus(CODEBOOK_SEED, cfg, CODEBOOK_CORPUS)?;
        let mut rows = Vec::new();
        for u in &corpus {
            rows.extend_from_slice(renderer.render(u)?.frames.data());
        }
        let n = rows.len() / cfg.frame_dim;
        let data = Tensor::new(vec![n, cfg.frame_dim], rows)?;
        Self::new(kmeans(&data, cfg.speech_vocab - 1, KMEANS_ITERS, CODEBOOK_SEED)?)
    }

    pub fn size(&self) -> usize {
        self.centroids.rows()
    }

    /// The id reserved for end of speech.
    pub fn eos(&self) -> usize {
        self.size()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroid(&self, id: usize) -> &[f32] {
        self.centroids.row(id)
    }

    pub fn centroids(&self) -> &Tensor<f32> {
        &self.centroids
    }

    /// Nearest centroid; ties go to the lowest id.
    pub fn nearest(&self, x: &[f32]) -> usize {
        let mut best = (0, f32::INFINITY);
        for i in 0..self.size() {
            let d: f32 = self.centroid(i).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        SpeechFrames {
            frames: self.centroids.clone(),
        }
        .to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::new(SpeechFrames::from_bytes(bytes)?.frames)
    }

    /// Measures the margin over every frame rendered from `corpus`.
    pub fn margin(&self, renderer: &Renderer, corpus: &[crate::toy_world::ToyUtterance]) -> Result<MarginReport> {
        let mut r = 0f32;
        let mut frames = 0;
        for u in corpus {
            let f = renderer.render(u)?;
            for i in 0..f.len() {
                let x = f.frame(i);
                r = r.max(dist(x, self.centroid(self.nearest(x))));
                frames += 1;
            }
        }
        let centers: Vec<Vec<f32>> = renderer.classes().into_iter().map(|c| renderer.center(c)).collect();
        let offset = (0..self.size())
            .map(|i| {
                centers
                    .iter()
                    .map(|c| dist(c, self.centroid(i)))
                    .fold(f32::INFINITY, f32::min)
            })
            .fold(0f32, f32::max);
        Ok(MarginReport {
            min_center_distance: renderer.min_center_distance(),
            max_quant_radius: r,
            max_spread: renderer.max_spread(),
            max_centroid_offset: offset,
            frames_measured: frames,
        })
    }
}

/// Per-frame nearest-centroid quantization followed by EOS.
pub fn codec_encode(codebook: &Codebook, frames: &SpeechFrames) -> Result<SpeechTokens> {
    if frames.dim() != codebook.dim() {
        return arg_err(format!("frame dim {} but codebook dim {}", frames.dim(), codebook.dim()));
    }
    let body = (0..frames.len()).map(|i| codebook.nearest(frames.frame(i))).collect();
    SpeechTokens::from_body(body, codebook.eos())
}

/// Centroid lookup for every token before EOS.
pub fn codec_decode(codebook: &Codebook, tokens: &SpeechTokens) -> Result<SpeechFrames> {
    if tokens.eos() != codebook.eos() {
        return Err(Error::Format(format!(
            "tokens use EOS {} but the codebook reserves {}",
            tokens.eos(),
            codebook.eos()
        )));
    }
    let mut data = Vec::with_capacity(tokens.body().len() * codebook.dim());
    for &t in tokens.body() {
        if t >= codebook.size() {
            return Err(Error::Format(format!("unknown speech token {t}")));
        }
        data.extend_from_slice(codebook.centroid(t));
    }
    SpeechFrames::new(Tensor::new(vec![tokens.body().len(), codebook.dim()], data)?)
}

/// Lloyd's k-means with k-means++ seeding. Empty clusters are reseeded at the
/// point farthest from its centroid. Accumulation is in f64 over rows in
/// order, so the result depends only on `(data, k, iters, seed)`.
pub fn kmeans(data: &Tensor<f32>, k: usize, iters: usize, seed: u64) -> Result<Tensor<f32>> {
    if data.rank() != 2 || k == 0 || data.rows() < k {
        return arg_err("k-means needs at least k rows");
    }
    let (n, f) = (data.rows(), data.cols());
    let sq = |a: &[f32], b: &[f32]| -> f64 { a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f32>> = vec![data.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq(data.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &v) in d2.iter().enumerate() {
                acc += v;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let c = data.row(pick).to_vec();
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq(data.row(i), &c));
        }
        centers.push(c);
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        let mut dist_to = vec![0f64; n];
        for i in 0..n {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centers.iter().enumerate() {
                let d = sq(data.row(i), c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            assign[i] = best.0;
            dist_to[i] = best.1;
        }
        let mut sums = vec![vec![0f64; f]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, &x) in sums[assign[i]].iter_mut().zip(data.row(i)) {
                *s += x as f64;
            }
        }
        let mut moved = false;
        for j in 0..k {
            let next: Vec<f32> = if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dist_to[a].total_cmp(&dist_to[b]).then(b.cmp(&a)))
                    .expect("n > 0");
                dist_to[far] = 0.0;
                data.row(far).to_vec()
            } else {
                sums[j].iter().map(|s| (s / counts[j] as f64) as f32).collect()
            };
            moved |= next != centers[j];
            centers[j] = next;
        }
        if !moved {
            break;
        }
    }
    Tensor::from_rows(&centers)
}

//! Synthetic clustered image-caption corpus with a VQA task on top.
//!
//! Every cluster has a prototype image (a modality pattern plus a cluster
//! pattern), a site token and a finding. Corpus captions name the modality,
//! the site and, for a configurable share of pairs, the finding. VQA items
//! ask either for something visible in the image (modality, yes/no) or for
//! the finding, which the image alone does not reveal. The last
//! `heldout_clusters` clusters supply the test split, so finding questions
//! on test images can only be answered through retrieved captions.
//!
//! Training clusters do reveal their finding through the image, so a model
//! can memorize them instead of reading retrieved captions. The defaults use
//! many clusters with few questions each, which makes memorizing costlier
//! than copying.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{emit_corpus, pair_id_of, read_corpus, CorpusSummary, ImageTextPair, IMAGES_DIR};
use crate::error::{RammError, Result};
use crate::kv::KvMap;
use crate::store::SourceTag;
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const CORPUS_DIR: &str = "corpus";
pub const TRAIN_FILE: &str = "vqa_train.jsonl";
pub const TEST_FILE: &str = "vqa_test.jsonl";
pub const SPEC_FILE: &str = "spec.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub pairs_per_cluster: usize,
    pub vqa_per_cluster: usize,
    /// Clusters whose VQA items form the test split.
    pub heldout_clusters: usize,
    pub patch_grid: usize,
    pub d_patch: usize,
    /// Standard deviation of the cluster pattern added to the modality pattern.
    pub cluster_scale: f64,
    /// Per-pixel noise around the prototype.
    pub noise: f64,
    /// Minimum RMS distance between any two prototypes.
    pub margin: f64,
    pub retrieval_fraction: f64,
    /// Share of corpus captions that mention their cluster's finding.
    pub answer_caption_fraction: f64,
    pub modalities: Vec<String>,
    pub findings: Vec<String>,
    pub finding_question: String,
    pub modality_question: String,
    /// `{m}` is replaced by a modality name.
    pub closed_question: String,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_clusters: 64,
            pairs_per_cluster: 12,
            vqa_per_cluster: 6,
            heldout_clusters: 16,
            patch_grid: 2,
            d_patch: 8,
            cluster_scale: 1.0,
            noise: 0.3,
            margin: 0.8,
            retrieval_fraction: 0.5,
            answer_caption_fraction: 1.0,
            modalities: ["ct", "mri", "xray"].map(String::from).to_vec(),
            findings: ["nodule", "effusion", "fracture", "mass"].map(String::from).to_vec(),
            finding_question: "what abnormality is seen".into(),
            modality_question: "which modality was used".into(),
            closed_question: "is this a {m} image".into(),
            seed: 0,
        }
    }
}

fn join(v: &[String]) -> String {
    v.join(",")
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect()
}

impl SyntheticSpec {
    pub fn n_patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RammError::Config(format!("synth: {m}")));
        if !(0.0..=1.0).contains(&self.retrieval_fraction) {
            return bad("retrieval_fraction must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.answer_caption_fraction) {
            return bad("answer_caption_fraction must be in [0, 1]");
        }
        if self.n_clusters == 0 || self.heldout_clusters > self.n_clusters {
            return bad("need at least one cluster and heldout_clusters <= n_clusters");
        }
        if self.modalities.len() < 2 || self.findings.is_empty() {
            return bad("need two or more modalities and one or more findings");
        }
        if self.patch_grid == 0 || self.d_patch == 0 || self.noise < 0.0 || self.margin < 0.0 {
            return bad("patch_grid, d_patch must be positive and noise, margin non-negative");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("synth.n_clusters", self.n_clusters);
        kv.set("synth.pairs_per_cluster", self.pairs_per_cluster);
        kv.set("synth.vqa_per_cluster", self.vqa_per_cluster);
        kv.set("synth.heldout_clusters", self.heldout_clusters);
        kv.set("synth.patch_grid", self.patch_grid);
        kv.set("synth.d_patch", self.d_patch);
        kv.set("synth.cluster_scale", self.cluster_scale);
        kv.set("synth.noise", self.noise);
        kv.set("synth.margin", self.margin);
        kv.set("synth.retrieval_fraction", self.retrieval_fraction);
        kv.set("synth.answer_caption_fraction", self.answer_caption_fraction);
        kv.set("synth.modalities", join(&self.modalities));
        kv.set("synth.findings", join(&self.findings));
        kv.set("synth.finding_question", &self.finding_question);
        kv.set("synth.modality_question", &self.modality_question);
        kv.set("synth.closed_question", &self.closed_question);
        kv.set("synth.seed", self.seed);
        kv
    }

    pub fn update_from_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.read("synth.n_clusters", &mut self.n_clusters)?;
        kv.read("synth.pairs_per_cluster", &mut self.pairs_per_cluster)?;
        kv.read("synth.vqa_per_cluster", &mut self.vqa_per_cluster)?;
        kv.read("synth.heldout_clusters", &mut self.heldout_clusters)?;
        kv.read("synth.patch_grid", &mut self.patch_grid)?;
        kv.read("synth.d_patch", &mut self.d_patch)?;
        kv.read("synth.cluster_scale", &mut self.cluster_scale)?;
        kv.read("synth.noise", &mut self.noise)?;
        kv.read("synth.margin", &mut self.margin)?;
        kv.read("synth.retrieval_fraction", &mut self.retrieval_fraction)?;
        kv.read("synth.answer_caption_fraction", &mut self.answer_caption_fraction)?;
        kv.read("synth.finding_question", &mut self.finding_question)?;
        kv.read("synth.modality_question", &mut self.modality_question)?;
        kv.read("synth.closed_question", &mut self.closed_question)?;
        kv.read("synth.seed", &mut self.seed)?;
        if let Some(v) = kv.get_str("synth.modalities") {
            self.modalities = split_list(v);
        }
        if let Some(v) = kv.get_str("synth.findings") {
            self.findings = split_list(v);
        }
        Ok(())
    }

    /// Hash of every field, seed included.
    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(self.to_kv().render().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
    }

    pub fn modality_of(&self, cluster: usize) -> usize {
        (cluster + cluster / self.findings.len()) % self.modalities.len()
    }

    pub fn finding_of(&self, cluster: usize) -> usize {
        cluster % self.findings.len()
    }

    pub fn is_heldout(&self, cluster: usize) -> bool {
        cluster >= self.n_clusters - self.heldout_clusters
    }

    pub fn site_token(cluster: usize) -> String {
        format!("site{cluster}")
    }

    /// Every answer the task can ask for: modalities, findings, yes, no.
    pub fn answer_vocab(&self) -> Vec<String> {
        let mut v: Vec<String> = self.modalities.iter().chain(&self.findings).cloned().collect();
        v.push("yes".into());
        v.push("no".into());
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Finding,
    Modality,
    Closed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaItem {
    pub id: String,
    pub cluster: usize,
    pub image: Tensor<f32>,
    pub question: String,
    pub answer: String,
    pub kind: QuestionKind,
}

impl VqaItem {
    /// The answer is only recorded in corpus captions, never in the image.
    pub fn retrieval_required(&self) -> bool {
        self.kind == QuestionKind::Finding
    }

    pub fn closed(&self) -> bool {
        is_closed_answer(&self.answer)
    }
}

pub fn is_closed_answer(answer: &str) -> bool {
    matches!(answer.to_ascii_lowercase().as_str(), "yes" | "no")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct VqaRecord {
    id: String,
    cluster: usize,
    image: PathBuf,
    question: String,
    answer: String,
    kind: QuestionKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub pair: ImageTextPair,
    pub image: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub spec: SyntheticSpec,
    pub corpus: Vec<CorpusEntry>,
    pub train: Vec<VqaItem>,
    pub test: Vec<VqaItem>,
}

impl SynthData {
    /// All texts the tokenizer has to know, in a fixed order.
    pub fn texts(&self) -> Vec<String> {
        let mut t: Vec<String> = self.corpus.iter().map(|c| c.pair.caption.clone()).collect();
        t.extend(self.train.iter().chain(&self.test).map(|q| q.question.clone()));
        t.extend(self.spec.answer_vocab());
        t
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn rms_distance(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Prototype image of every cluster, pairwise at least `margin` apart.
pub fn prototypes(spec: &SyntheticSpec) -> Result<Vec<Vec<f64>>> {
    let n = spec.n_patches() * spec.d_patch;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0001);
    let bases: Vec<Vec<f64>> = (0..spec.modalities.len()).map(|_| gaussian(&mut rng, n, 1.0)).collect();
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(spec.n_clusters);
    for k in 0..spec.n_clusters {
        let base = &bases[spec.modality_of(k)];
        let mut tries = 0;
        loop {
            let p: Vec<f64> = base
                .iter()
                .zip(gaussian(&mut rng, n, spec.cluster_scale))
                .map(|(b, c)| b + c)
                .collect();
            if protos.iter().all(|q| rms_distance(q, &p) >= spec.margin) {
                protos.push(p);
                break;
            }
            tries += 1;
            if tries > 1000 {
                return Err(RammError::Config(format!(
                    "synth: cannot place {} clusters {} apart; lower the margin",
                    spec.n_clusters, spec.margin
                )));
            }
        }
    }
    Ok(protos)
}

fn sample_image(rng: &mut ChaCha8Rng, proto: &[f64], spec: &SyntheticSpec) -> Tensor<f32> {
    let data = proto
        .iter()
        .zip(gaussian(rng, proto.len(), spec.noise))
        .map(|(p, e)| (p + e) as f32)
        .collect();
    Tensor::new(vec![spec.n_patches(), spec.d_patch], data).expect("shape matches prototype")
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SynthData> {
    spec.validate()?;
    let protos = prototypes(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0002);
    let mut corpus = Vec::new();
    for (k, proto) in protos.iter().enumerate() {
        let m = &spec.modalities[spec.modality_of(k)];
        let site = SyntheticSpec::site_token(k);
        let with_answer = (spec.answer_caption_fraction * spec.pairs_per_cluster as f64).round() as usize;
        for i in 0..spec.pairs_per_cluster {
            let caption = if i < with_answer {
                format!("{m} {site} shows {}", spec.findings[spec.finding_of(k)])
            } else {
                format!("{m} {site} study")
            };
            let article = format!("synth-{k:03}");
            let figure = format!("p{i:03}");
            corpus.push(CorpusEntry {
                pair: ImageTextPair {
                    pair_id: pair_id_of(&article, &figure),
                    article_id: article,
                    figure_id: figure,
                    caption,
                    image: PathBuf::new(),
                    source_tag: SourceTag::Synth,
                },
                image: sample_image(&mut rng, proto, spec),
            });
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    let n_finding = (spec.retrieval_fraction * spec.vqa_per_cluster as f64).round() as usize;
    for (k, proto) in protos.iter().enumerate() {
        let mi = spec.modality_of(k);
        for j in 0..spec.vqa_per_cluster {
            let image = sample_image(&mut rng, proto, spec);
            let (kind, question, answer) = if j < n_finding {
                (QuestionKind::Finding, spec.finding_question.clone(), spec.findings[spec.finding_of(k)].clone())
            } else if (j - n_finding).is_multiple_of(2) {
                (QuestionKind::Modality, spec.modality_question.clone(), spec.modalities[mi].clone())
            } else {
                let asked = if rng.random_bool(0.5) {
                    mi
                } else {
                    (mi + rng.random_range(1..spec.modalities.len())) % spec.modalities.len()
                };
                let q = spec.closed_question.replace("{m}", &spec.modalities[asked]);
                (QuestionKind::Closed, q, if asked == mi { "yes" } else { "no" }.to_string())
            };
            let item = VqaItem {
                id: format!("q{k:03}-{j:03}"),
                cluster: k,
                image,
                question,
                answer,
                kind,
            };
            if spec.is_heldout(k) {
                test.push(item);
            } else {
                train.push(item);
            }
        }
    }
    Ok(SynthData {
        spec: spec.clone(),
        corpus,
        train,
        test,
    })
}

fn write_vqa(dir: &Path, file: &str, items: &[VqaItem]) -> Result<()> {
    let mut s = String::new();
    for q in items {
        let rel = PathBuf::from(IMAGES_DIR).join(format!("{}.ten", q.id));
        write_tensor(dir.join(&rel), &q.image)?;
        let rec = VqaRecord {
            id: q.id.clone(),
            cluster: q.cluster,
            image: rel,
            question: q.question.clone(),
            answer: q.answer.clone(),
            kind: q.kind,
        };
        s.push_str(&serde_json::to_string(&rec)?);
        s.push('\n');
    }
    fs::write(dir.join(file), s)?;
    Ok(())
}

/// Write `corpus/`, the two VQA splits with their images and `spec.txt`.
pub fn write_synthetic(dir: &Path, data: &SynthData) -> Result<()> {
    let corpus_dir = dir.join(CORPUS_DIR);
    fs::create_dir_all(corpus_dir.join(IMAGES_DIR))?;
    fs::create_dir_all(dir.join(IMAGES_DIR))?;
    let mut pairs = Vec::with_capacity(data.corpus.len());
    for c in &data.corpus {
        let path = corpus_dir.join(IMAGES_DIR).join(format!("{:016x}.ten", c.pair.pair_id));
        write_tensor(&path, &c.image)?;
        pairs.push(ImageTextPair {
            image: path,
            ..c.pair.clone()
        });
    }
    let summary = CorpusSummary {
        pairs_emitted: pairs.len(),
        ..CorpusSummary::default()
    };
    emit_corpus(&corpus_dir, &pairs, &[], &summary)?;
    write_vqa(dir, TRAIN_FILE, &data.train)?;
    write_vqa(dir, TEST_FILE, &data.test)?;
    let mut kv = data.spec.to_kv();
    kv.set("synth.fingerprint", format!("{:016x}", data.spec.fingerprint()));
    fs::write(dir.join(SPEC_FILE), kv.render())?;
    Ok(())
}

/// Corpus pairs with their image tensors loaded.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusEntry>> {
    read_corpus(dir)?
        .into_iter()
        .map(|pair| {
            let path = dir.join(&pair.image);
            let image = read_tensor(&path)
                .map_err(|e| match e {
                    RammError::Io(_) => RammError::MissingArtifact(path.clone()),
                    e => e,
                })?
                .into_precision();
            Ok(CorpusEntry { pair, image })
        })
        .collect()
}

/// VQA items of one split file; image paths are relative to the file's directory.
pub fn load_vqa(path: &Path) -> Result<Vec<VqaItem>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => RammError::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })?;
    let root = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r: VqaRecord = serde_json::from_str(l)?;
            let image = read_tensor(root.join(&r.image))?.into_precision();
            Ok(VqaItem {
                id: r.id,
                cluster: r.cluster,
                image,
                question: r.question,
                answer: r.answer,
                kind: r.kind,
            })
        })
        .collect()
}

/// Reload a directory written by [`write_synthetic`].
pub fn load_synthetic(dir: &Path) -> Result<SynthData> {
    let path = dir.join(SPEC_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => RammError::MissingArtifact(path.clone()),
        _ => e.into(),
    })?;
    let mut spec = SyntheticSpec::default();
    spec.update_from_kv(&KvMap::parse(&text)?)?;
    Ok(SynthData {
        spec,
        corpus: load_corpus(&dir.join(CORPUS_DIR))?,
        train: load_vqa(&dir.join(TRAIN_FILE))?,
        test: load_vqa(&dir.join(TEST_FILE))?,
    })
}

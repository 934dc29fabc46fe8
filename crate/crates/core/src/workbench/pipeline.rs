use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{Precision, RunConfig, SegmentKind, JSAE_LABEL};
use super::ingest::{ingest, read_source, CorpusRecord};
use super::report::write_report;
use super::sclr;
use crate::attribution::{edge_scores, rank_edges, AttributionConfig, EdgeScoreMatrix, EdgeScoreMeta, LatentMap};
use crate::error::{Error, Result};
use crate::jsae::{mean_jacobian_l1, train_jsae_pair, JsaeTrainConfig};
use crate::lm::{harvest, train_lm, Corpus, HarvestConfig, LmConfig, LmWeights, Segment, Site, Split, TrainHistory};
use crate::sae::{chunk_usage, splice_eval, train_family, ChunkUsage, FamilyMeta, SaeFamily, Variant};
use crate::scalar::{ablation_curves, auc, edge_sequence, validation_prompts, AblationCurve, Reference};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    TrainLm,
    TrainSae,
    TrainJsae,
    Attribute,
    Scalar,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::TrainLm,
        Stage::TrainSae,
        Stage::TrainJsae,
        Stage::Attribute,
        Stage::Scalar,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::TrainLm => "train-lm",
            Stage::TrainSae => "train-sae",
            Stage::TrainJsae => "train-jsae",
            Stage::Attribute => "attribute",
            Stage::Scalar => "scalar",
            Stage::Report => "report",
        }
    }

    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::TrainLm => &[Stage::Ingest],
            Stage::TrainSae | Stage::TrainJsae => &[Stage::TrainLm],
            Stage::Attribute => &[Stage::TrainSae, Stage::TrainJsae],
            Stage::Scalar => &[Stage::Attribute],
            Stage::Report => &[Stage::Scalar],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub bytes: u64,
    pub fnv: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Hash of the configuration this stage read, chained through its
    /// upstream stages.
    pub key: String,
    pub outputs: Vec<FileRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub precision: Precision,
    pub seeds: super::config::Seeds,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn stage(&self, s: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == s)
    }
}

fn fnv(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn hex(v: u64) -> String {
    format!("{v:016x}")
}

/// One row of the SCALAR score table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub variant: String,
    pub segment: SegmentKind,
    pub layer: usize,
    pub reference: Reference,
    pub absolute: f64,
    pub abs_sem: f64,
    pub relative: f64,
    pub rel_sem: f64,
    pub total_edges: usize,
    pub prompts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmRecord {
    pub config: LmConfig,
    pub parameters: usize,
    pub history: TrainHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub site: Site,
    pub final_loss: f64,
    pub delta_ce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeRecord {
    pub meta: FamilyMeta,
    pub parameters: usize,
    pub members: Vec<MemberReport>,
    pub chunk_usage: ChunkUsage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsaeRecord {
    pub meta: FamilyMeta,
    pub segment: Segment,
    pub lambda: f64,
    pub recon_x: f64,
    pub recon_y: f64,
    pub jac_l1: f64,
}

/// An artifact directory driven by one configuration.
pub struct Pipeline {
    pub config: RunConfig,
    pub out: PathBuf,
    manifest: Manifest,
    /// Messages go here rather than straight to stdout so library users can
    /// silence them.
    pub log: Box<dyn FnMut(&str)>,
}

impl Pipeline {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out = out.into();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let path = out.join("manifest.json");
        let mut manifest: Manifest = if path.exists() { read_json(&path)? } else { Manifest::default() };
        manifest.config_hash = hex(config.hash());
        manifest.precision = config.precision;
        manifest.seeds = config.seeds.clone();
        Ok(Self {
            config,
            out,
            manifest,
            log: Box::new(|_| {}),
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Runs every stage, skipping those already complete for this config.
    pub fn run_all(&mut self) -> Result<()> {
        for s in Stage::ALL {
            self.run(s)?;
        }
        Ok(())
    }

    /// Runs one stage after checking its upstream stages are complete.
    /// Returns `false` when the stage was already up to date.
    pub fn run(&mut self, stage: Stage) -> Result<bool> {
        for &u in stage.upstream() {
            if !self.is_complete(u)? {
                return Err(tagged(stage, Error::invalid(format!("missing stage outputs: run `{u}` first"))));
            }
        }
        if self.is_complete(stage)? {
            (self.log)(&format!("{stage}: up to date"));
            return Ok(false);
        }
        (self.log)(&format!("{stage}: running"));
        let outputs = match self.config.precision {
            Precision::F32 => self.execute::<f32>(stage),
            Precision::F64 => self.execute::<f64>(stage),
        }
        .map_err(|e| tagged(stage, e))?;
        let mut files = Vec::with_capacity(outputs.len());
        for rel in outputs {
            let bytes = std::fs::read(self.out.join(&rel)).map_err(|e| Error::io(self.out.join(&rel), e))?;
            files.push(FileRecord {
                path: rel,
                bytes: bytes.len() as u64,
                fnv: hex(fnv(&bytes)),
            });
        }
        let record = StageRecord {
            stage,
            key: self.key(stage),
            outputs: files,
        };
        self.manifest.stages.retain(|r| r.stage != stage);
        self.manifest.stages.push(record);
        self.manifest.stages.sort_by_key(|r| r.stage);
        self.write_manifest()?;
        Ok(true)
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.out.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    /// Whether the manifest holds this stage under the current key with
    /// every output present and unchanged.
    pub fn is_complete(&self, stage: Stage) -> Result<bool> {
        let Some(rec) = self.manifest.stage(stage) else { return Ok(false) };
        if rec.key != self.key(stage) {
            return Ok(false);
        }
        if stage == Stage::Ingest {
            if let Some(want) = &self.config.corpus {
                let have: CorpusRecord = match read_json(&self.out.join("corpus/corpus.json")) {
                    Ok(r) => r,
                    Err(_) => return Ok(false),
                };
                if have.source != want.to_string_lossy() {
                    return Ok(false);
                }
            }
        }
        for f in &rec.outputs {
            match std::fs::read(self.out.join(&f.path)) {
                Ok(b) if hex(fnv(&b)) == f.fnv => {}
                _ => return Ok(false),
            }
        }
        Ok(true)
    }

    /// Hash of the configuration a stage reads and of its upstream stages'
    /// recorded outputs, so any upstream change invalidates it.
    pub fn key(&self, stage: Stage) -> String {
        let c = &self.config;
        let own = match stage {
            Stage::Ingest => serde_json::json!([c.seeds.split, c.lm.context]),
            Stage::TrainLm => serde_json::json!([c.lm, c.lm_train, c.seeds.lm, c.precision]),
            Stage::TrainSae => serde_json::json!([c.sae, c.seeds.harvest, c.seeds.sae]),
            Stage::TrainJsae => serde_json::json!([c.jsae, c.sae.config, c.sae.samples, c.seeds.harvest, c.seeds.sae]),
            Stage::Attribute => serde_json::json!([c.attribution, c.layers, c.seeds.attribution]),
            Stage::Scalar => serde_json::json!([c.scalar.prompts, c.scalar.prompt_len, c.scalar.references]),
            Stage::Report => serde_json::json!([c.scalar.comparisons]),
        };
        let mut h = FnvHasher::default();
        h.write(stage.name().as_bytes());
        h.write(own.to_string().as_bytes());
        for &u in stage.upstream() {
            match self.manifest.stage(u) {
                Some(r) => r.outputs.iter().for_each(|f| {
                    h.write(f.path.as_bytes());
                    h.write(f.fnv.as_bytes());
                }),
                None => h.write(b"missing"),
            }
        }
        hex(h.finish())
    }

    fn execute<S: Scalar>(&mut self, stage: Stage) -> Result<Vec<String>> {
        match stage {
            Stage::Ingest => self.stage_ingest(),
            Stage::TrainLm => self.stage_train_lm::<S>(),
            Stage::TrainSae => self.stage_train_sae::<S>(),
            Stage::TrainJsae => self.stage_train_jsae::<S>(),
            Stage::Attribute => self.stage_attribute::<S>(),
            Stage::Scalar => self.stage_scalar::<S>(),
            Stage::Report => write_report(&self.out, &self.config),
        }
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.out.join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(p)
    }

    fn put_json<T: Serialize>(&self, rel: &str, v: &T, outputs: &mut Vec<String>) -> Result<()> {
        let p = self.path(rel)?;
        std::fs::write(&p, serde_json::to_string_pretty(v)? + "\n").map_err(|e| Error::io(&p, e))?;
        outputs.push(rel.to_string());
        Ok(())
    }

    fn put_sclr<S: Scalar>(&self, rel: &str, tensors: &[(String, &Tensor<S>)], outputs: &mut Vec<String>) -> Result<()> {
        sclr::save(&self.path(rel)?, tensors)?;
        outputs.push(rel.to_string());
        Ok(())
    }

    // ---- loaders shared by the stages and the examples ----

    pub fn corpus(&self) -> Result<Corpus> {
        let raw = self.out.join("corpus/raw.txt");
        let bytes = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
        Corpus::from_bytes(&bytes, self.config.lm.context, self.config.seeds.split)
    }

    pub fn load_lm<S: Scalar>(&self) -> Result<LmWeights<S>> {
        LmWeights::from_named(&self.config.lm, sclr::load(&self.out.join("lm/weights.sclr"))?)
    }

    /// The trained family of `variant` that holds both sites of `seg`.
    pub fn load_family<S: Scalar>(&self, variant: Variant, seg: Segment) -> Result<SaeFamily<S>> {
        let kind = SegmentKind::of(seg);
        let stem = format!("sae/{}.{}", variant.name(), kind.family_name(kind.family_of(seg.layer())));
        let rec: SaeRecord = read_json(&self.out.join(format!("{stem}.json")))?;
        SaeFamily::from_parts(&rec.meta, sclr::load(&self.out.join(format!("{stem}.sclr")))?)
    }

    pub fn load_jsae<S: Scalar>(&self, seg: Segment, lambda: f64) -> Result<SaeFamily<S>> {
        let stem = jsae_stem(seg, lambda);
        let rec: JsaeRecord = read_json(&self.out.join(format!("{stem}.json")))?;
        SaeFamily::from_parts(&rec.meta, sclr::load(&self.out.join(format!("{stem}.sclr")))?)
    }

    pub fn load_scores(&self, label: &str, seg: Segment) -> Result<EdgeScoreMatrix> {
        let stem = format!("scores/{label}.{seg}");
        let meta: EdgeScoreMeta = read_json(&self.out.join(format!("{stem}.json")))?;
        let mut t = sclr::load::<f64>(&self.out.join(format!("{stem}.sclr")))?;
        let scores = t.pop().filter(|(n, _)| n == "scores").map(|(_, t)| t);
        let scores = scores.ok_or_else(|| Error::Format(format!("{stem}.sclr holds no `scores` tensor")))?;
        Ok(EdgeScoreMatrix {
            scores,
            samples: meta.samples,
            terms: meta.terms,
        })
    }

    pub fn load_curves(&self, label: &str, seg: Segment) -> Result<Vec<AblationCurve>> {
        read_json(&self.out.join(format!("curves/{label}.{seg}.json")))
    }

    pub fn load_scores_table(&self) -> Result<Vec<ScoreRow>> {
        read_json(&self.out.join("scalar/scores.json"))
    }

    /// Every scored `(variant label, segment)` pair.
    pub fn pairs(&self) -> Vec<(String, Segment)> {
        let c = &self.config;
        let mut out = Vec::new();
        for &kind in &c.sae.segments {
            for k in c.layers() {
                for v in &c.sae.variants {
                    out.push((v.name().to_string(), kind.at(k)));
                }
            }
        }
        if c.jsae.score_lambda.is_some() {
            for &seg in &c.jsae.segments {
                out.push((JSAE_LABEL.to_string(), seg));
            }
        }
        out
    }

    fn pair_family<S: Scalar>(&self, label: &str, seg: Segment) -> Result<SaeFamily<S>> {
        if label == JSAE_LABEL {
            let lambda = self.config.jsae.score_lambda.ok_or_else(|| Error::Config("no score_lambda".into()))?;
            self.load_jsae(seg, lambda)
        } else {
            self.load_family(label.parse()?, seg)
        }
    }

    // ---- stages ----

    fn stage_ingest(&mut self) -> Result<Vec<String>> {
        let (source, bytes) = read_source(self.config.corpus.as_deref())?;
        let (_, record): (Corpus, CorpusRecord) = ingest(&source, &bytes, self.config.lm.context, self.config.seeds.split)?;
        let mut outputs = Vec::new();
        let raw = self.path("corpus/raw.txt")?;
        std::fs::write(&raw, &bytes).map_err(|e| Error::io(&raw, e))?;
        outputs.push("corpus/raw.txt".into());
        self.put_json("corpus/corpus.json", &record, &mut outputs)?;
        (self.log)(&format!("  {} tokens, {} train / {} val blocks", record.tokens, record.train_blocks.len(), record.val_blocks.len()));
        Ok(outputs)
    }

    fn stage_train_lm<S: Scalar>(&mut self) -> Result<Vec<String>> {
        let corpus = self.corpus()?;
        let lm = LmConfig {
            seed: self.config.seeds.lm,
            ..self.config.lm.clone()
        };
        let tc = crate::lm::LmTrainConfig {
            seed: self.config.seeds.lm,
            ..self.config.lm_train.clone()
        };
        let (w, history) = train_lm::<S>(&corpus, &lm, &tc)?;
        (self.log)(&format!(
            "  val CE {:.3} -> {:.3}",
            history.initial_val().unwrap_or(f64::NAN),
            history.final_val().unwrap_or(f64::NAN)
        ));
        let mut outputs = Vec::new();
        self.put_sclr("lm/weights.sclr", &w.named_tensors(), &mut outputs)?;
        let record = LmRecord {
            config: self.config.lm.clone(),
            parameters: w.parameter_count(),
            history,
        };
        self.put_json("lm/train.json", &record, &mut outputs)?;
        Ok(outputs)
    }

    fn harvest_sites<S: Scalar>(&self, w: &LmWeights<S>, corpus: &Corpus, sites: Vec<Site>) -> Result<crate::lm::Harvest<S>> {
        harvest(
            w,
            corpus,
            &HarvestConfig {
                sites,
                max_samples: self.config.sae.samples,
                seq_len: self.config.lm.context,
                split: Split::Train,
                seed: self.config.seeds.harvest,
            },
        )
    }

    fn stage_train_sae<S: Scalar>(&mut self) -> Result<Vec<String>> {
        let c = self.config.clone();
        let corpus = self.corpus()?;
        let w = self.load_lm::<S>()?;
        let mut sites: Vec<Site> = c.sae.segments.iter().flat_map(|k| k.families(c.lm.n_layers)).flatten().collect();
        sites.sort();
        sites.dedup();
        let h = self.harvest_sites(&w, &corpus, sites)?;
        let mut outputs = Vec::new();
        let groups: Vec<(SegmentKind, usize, Vec<Site>)> = c
            .sae
            .segments
            .iter()
            .flat_map(|&kind| kind.families(c.lm.n_layers).into_iter().enumerate().map(move |(f, s)| (kind, f, s)))
            .collect();
        for (kind, f, fsites) in groups {
            let data: Vec<&Tensor<S>> = fsites.iter().map(|&s| h.site(s)).collect::<Result<_>>()?;
            for &variant in &c.sae.variants {
                let mut fam = SaeFamily::<S>::new(variant, &fsites, c.lm.d_model, &c.sae.config, c.seeds.sae)?;
                fam.init_decoder_bias(&data)?;
                let train = crate::sae::SaeTrainConfig {
                    seed: c.seeds.sae,
                    ..c.sae.train.clone()
                };
                let hist = train_family(&mut fam, &data, &train)?;
                let tail = hist.tail_mean(50);
                let mut members = Vec::with_capacity(fsites.len());
                for (m, &site) in fsites.iter().enumerate() {
                    let s = splice_eval(&w, &[fam.sae(m)?], &corpus, Split::Val, c.sae.splice_windows, c.lm.context - 1)?;
                    members.push(MemberReport {
                        site,
                        final_loss: tail[m],
                        delta_ce: s.delta_ce,
                    });
                }
                let record = SaeRecord {
                    meta: fam.meta(),
                    parameters: fam.parameter_count(),
                    members,
                    chunk_usage: chunk_usage(&fam, &data)?,
                };
                let name = kind.family_name(f);
                (self.log)(&format!("  {variant} over {name}: losses {:?}", tail.iter().map(|l| format!("{l:.2}")).collect::<Vec<_>>()));
                let stem = format!("sae/{}.{name}", variant.name());
                self.put_sclr(&format!("{stem}.sclr"), &fam.named_tensors(), &mut outputs)?;
                self.put_json(&format!("{stem}.json"), &record, &mut outputs)?;
            }
        }
        Ok(outputs)
    }

    fn stage_train_jsae<S: Scalar>(&mut self) -> Result<Vec<String>> {
        let c = self.config.clone();
        let mut outputs = Vec::new();
        if c.jsae.segments.is_empty() {
            return Ok(outputs);
        }
        let corpus = self.corpus()?;
        let w = self.load_lm::<S>()?;
        for &seg in &c.jsae.segments {
            let h = self.harvest_sites(&w, &corpus, vec![seg.up(), seg.down()])?;
            let (x, y) = (h.site(seg.up())?, h.site(seg.down())?);
            // Hold out the last tenth of rows for evaluation.
            let n = x.shape()[0];
            let cut = n - (n / 10).max(1);
            let (tx, ex) = split_rows(x, cut)?;
            let (ty, ey) = split_rows(y, cut)?;
            let train = JsaeTrainConfig {
                seed: c.seeds.sae,
                ..c.jsae.train.clone()
            };
            let mut sweep = Vec::new();
            for &lambda in &c.jsae.lambdas {
                let (fam, _) = train_jsae_pair(&w, seg, lambda, &tx, &ty, &c.sae.config, &train)?;
                let record = JsaeRecord {
                    meta: fam.meta(),
                    segment: seg,
                    lambda,
                    recon_x: fam.sae(0)?.recon_loss(&ex)?,
                    recon_y: fam.sae(1)?.recon_loss(&ey)?,
                    jac_l1: mean_jacobian_l1(&w, seg, &fam, &ex, train.eval_samples.min(ex.shape()[0]))?,
                };
                (self.log)(&format!("  {seg} λ={lambda}: recon {:.3}/{:.3} ‖J‖₁ {:.3}", record.recon_x, record.recon_y, record.jac_l1));
                let stem = jsae_stem(seg, lambda);
                self.put_sclr(&format!("{stem}.sclr"), &fam.named_tensors(), &mut outputs)?;
                self.put_json(&format!("{stem}.json"), &record, &mut outputs)?;
                sweep.push(record);
            }
            self.put_json(&format!("jsae/{seg}.sweep.json"), &sweep, &mut outputs)?;
        }
        Ok(outputs)
    }

    fn stage_attribute<S: Scalar>(&mut self) -> Result<Vec<String>> {
        let corpus = self.corpus()?;
        let w = self.load_lm::<S>()?;
        let cfg = AttributionConfig {
            seed: self.config.seeds.attribution,
            ..self.config.attribution.clone()
        };
        let mut outputs = Vec::new();
        for (label, seg) in self.pairs() {
            let fam = self.pair_family::<S>(&label, seg)?;
            let map = LatentMap::new(&w, seg, fam.sae_at(seg.up())?, fam.sae_at(seg.down())?, cfg.readout)?;
            let m = edge_scores(&map, &corpus, &cfg)?;
            let stem = format!("scores/{label}.{seg}");
            self.put_sclr(&format!("{stem}.sclr"), &[("scores".to_string(), &m.scores)], &mut outputs)?;
            let meta = EdgeScoreMeta {
                segment: seg,
                samples: m.samples,
                terms: m.terms,
                seed: cfg.seed,
                readout: cfg.readout,
            };
            self.put_json(&format!("{stem}.json"), &meta, &mut outputs)?;
            (self.log)(&format!("  {label} {seg}: {}×{} edges", m.width_down(), m.width_up()));
        }
        Ok(outputs)
    }

    fn stage_scalar<S: Scalar>(&mut self) -> Result<Vec<String>> {
        let c = self.config.clone();
        let corpus = self.corpus()?;
        let w = self.load_lm::<S>()?;
        let prompts = validation_prompts(&corpus, c.scalar.prompts, c.scalar.prompt_len)?;
        let mut outputs = Vec::new();
        let mut rows = Vec::new();
        for (label, seg) in self.pairs() {
            let fam = self.pair_family::<S>(&label, seg)?;
            let map = LatentMap::new(&w, seg, fam.sae_at(seg.up())?, fam.sae_at(seg.down())?, c.attribution.readout)?;
            let ranking = rank_edges(&self.load_scores(&label, seg)?)?;
            let seq = edge_sequence(ranking.len())?;
            let curves = ablation_curves(&map, &prompts, &ranking, &seq, &c.scalar.references)?;
            for curve in &curves {
                let s = auc(curve)?;
                rows.push(ScoreRow {
                    variant: label.clone(),
                    segment: SegmentKind::of(seg),
                    layer: seg.layer(),
                    reference: curve.reference,
                    absolute: s.absolute.value,
                    abs_sem: s.absolute.sem,
                    relative: s.relative.value,
                    rel_sem: s.relative.sem,
                    total_edges: s.total_edges,
                    prompts: prompts.len(),
                });
            }
            if let Some(r) = rows.iter().rev().find(|r| r.reference == c.scalar.references[0]) {
                (self.log)(&format!("  {label} {seg}: relative {:.4} ± {:.4}", r.relative, r.rel_sem));
            }
            self.put_json(&format!("curves/{label}.{seg}.json"), &curves, &mut outputs)?;
        }
        self.put_json("scalar/scores.json", &rows, &mut outputs)?;
        Ok(outputs)
    }
}

fn jsae_stem(seg: Segment, lambda: f64) -> String {
    format!("jsae/{seg}.lambda-{lambda:e}")
}

fn split_rows<S: Scalar>(x: &Tensor<S>, cut: usize) -> Result<(Tensor<S>, Tensor<S>)> {
    let (n, d) = x.dims2()?;
    Ok((
        Tensor::new(vec![cut, d], x.data()[..cut * d].to_vec())?,
        Tensor::new(vec![n - cut, d], x.data()[cut * d..].to_vec())?,
    ))
}

fn tagged(stage: Stage, e: Error) -> Error {
    match e {
        Error::Stage { .. } => e,
        e => Error::Stage {
            stage: stage.name().to_string(),
            source: Box::new(e),
        },
    }
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

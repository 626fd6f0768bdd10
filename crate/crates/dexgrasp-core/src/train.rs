//! The progressive grasp generator: a conditional denoising-diffusion
//! component that learns the intent-aligned grasp distribution, and a
//! regression refiner that repairs grasp quality.
//!
//! The diffusion component predicts the clean standardized pose from a
//! noised pose, the diffusion step, and the condition (object point-set
//! feature plus verb/part token embeddings). Its default loss is pose
//! regression plus hand chamfer; object penetration is excluded unless an
//! ablation explicitly weights it. The refiner consumes the coarse pose,
//! the coarse hand cloud, and the object cloud, and outputs an additive
//! pose correction trained with the full quality losses.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, GraspRecord, Split};
use crate::diffusion::{ddpm_sample, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::guidance::GuidanceSpec;
use crate::hand::{GraspPose, HandModel};
use crate::losses;
use crate::nets::{
    time_embedding_table, verb_token, MlpSpec, ParamSet, PartVocab, PointEncoder,
};
use crate::object::ObjectModel;
use crate::optim::{LrSchedule, OptimState};
use crate::posespace::PoseSpace;
use crate::records;
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

/// Seed of the canonical per-object conditioning cloud; fixed so training,
/// evaluation, and the CLI all see the same cloud for a given object.
pub const COND_CLOUD_SEED: u64 = 0x434f_4e44;
/// Seed of the canonical per-object quality cloud (penetration, contact).
pub const QUALITY_CLOUD_SEED: u64 = 0x5155_414c;
pub const QUALITY_CLOUD_POINTS: usize = 256;

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub idgc_epochs: usize,
    pub qgc_epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub lambda_para: f64,
    pub lambda_chamfer: f64,
    /// Penetration weight of the diffusion component (0 = excluded).
    pub idgc_lambda_pen: f64,
    /// Switch the diffusion penetration weight at (epoch, weight).
    pub idgc_pen_switch: Option<(usize, f64)>,
    pub qgc_lambda_pen: f64,
    pub qgc_lambda_cmap: f64,
    pub qgc_lambda_spen: f64,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    pub time_dim: usize,
    pub obj_feat: usize,
    pub obj_hidden: usize,
    pub verb_dim: usize,
    pub part_dim: usize,
    /// Object points fed to the point encoders.
    pub cond_points: usize,
    /// Coarse hand points fed to the refiner's hand encoder.
    pub hand_points: usize,
    /// Coarse samples drawn per condition when building refiner pairs.
    pub coarse_per_condition: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            idgc_epochs: 100,
            qgc_epochs: 20,
            batch_size: 64,
            lr_initial: 2.0e-4,
            lr_final: 2.0e-5,
            weight_decay: 5.0e-6,
            lambda_para: 10.0,
            lambda_chamfer: 1.0,
            idgc_lambda_pen: 0.0,
            idgc_pen_switch: None,
            qgc_lambda_pen: 100.0,
            qgc_lambda_cmap: 10.0,
            qgc_lambda_spen: 10.0,
            t_steps: 100,
            beta_start: 1.0e-4,
            beta_end: 0.02,
            hidden: 256,
            time_dim: 32,
            obj_feat: 128,
            obj_hidden: 64,
            verb_dim: 16,
            part_dim: 12,
            cond_points: 64,
            hand_points: 64,
            coarse_per_condition: 4,
        }
    }
}

impl GenConfig {
    fn echo(&self, kind: &str, vocab: &PartVocab) -> String {
        format!(
            "kind={kind}\nidgc_epochs={}\nqgc_epochs={}\nbatch_size={}\nlr_initial={}\n\
             lr_final={}\nweight_decay={}\nlambda_para={}\nlambda_chamfer={}\n\
             idgc_lambda_pen={}\nqgc_lambda_pen={}\nqgc_lambda_cmap={}\nqgc_lambda_spen={}\n\
             t_steps={}\nbeta_start={}\nbeta_end={}\nhidden={}\ntime_dim={}\nobj_feat={}\n\
             obj_hidden={}\nverb_dim={}\npart_dim={}\ncond_points={}\nhand_points={}\n\
             coarse_per_condition={}\nvocab={}\n",
            self.idgc_epochs,
            self.qgc_epochs,
            self.batch_size,
            self.lr_initial,
            self.lr_final,
            self.weight_decay,
            self.lambda_para,
            self.lambda_chamfer,
            self.idgc_lambda_pen,
            self.qgc_lambda_pen,
            self.qgc_lambda_cmap,
            self.qgc_lambda_spen,
            self.t_steps,
            self.beta_start,
            self.beta_end,
            self.hidden,
            self.time_dim,
            self.obj_feat,
            self.obj_hidden,
            self.verb_dim,
            self.part_dim,
            self.cond_points,
            self.hand_points,
            self.coarse_per_condition,
            vocab.encode(),
        )
    }
}

fn parse_echo(meta: &str) -> BTreeMap<String, String> {
    meta.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// A sampling condition: canonical object points, scale, guidance tokens.
#[derive(Clone, Debug)]
pub struct Condition {
    pub object_id: String,
    pub cond_points: Vec<Vec3>,
    pub scale: f64,
    pub verb_tok: usize,
    pub part_toks: Vec<usize>,
}

/// Canonical conditioning cloud of an object.
pub fn condition_cloud(obj: &ObjectModel, n: usize) -> Result<Vec<Vec3>> {
    let seed = rng::stream(COND_CLOUD_SEED, &format!("cond/{}", obj.id)).gen();
    Ok(obj.sample_surface(n, seed)?.points)
}

/// Canonical quality cloud of an object (penetration / contact losses).
pub fn quality_cloud(obj: &ObjectModel, n: usize) -> Result<Vec<Vec3>> {
    let seed = rng::stream(QUALITY_CLOUD_SEED, &format!("quality/{}", obj.id)).gen();
    Ok(obj.sample_surface(n, seed)?.points)
}

pub fn condition_for(
    obj: &ObjectModel,
    guidance: &GuidanceSpec,
    vocab: &PartVocab,
    cond_points: usize,
) -> Result<Condition> {
    Ok(Condition {
        object_id: obj.id.clone(),
        cond_points: condition_cloud(obj, cond_points)?,
        scale: obj.bounding_radius(),
        verb_tok: verb_token(&guidance.verb)?,
        part_toks: guidance
            .finger_parts
            .iter()
            .map(|p| vocab.token(p.as_deref()))
            .collect::<Result<_>>()?,
    })
}

/// First-layer feature blocks of the denoiser. Column-concatenation of the
/// inputs is expressed as a sum of per-block matmuls.
#[derive(Clone, Debug)]
struct DenoiserInput {
    w_pose: usize,
    w_time: usize,
    w_obj: usize,
    w_verb: usize,
    w_part: Vec<usize>,
    bias: usize,
}

/// The conditional diffusion grasp component.
pub struct IdgcModel {
    pub params: ParamSet,
    obj_enc: PointEncoder,
    input: DenoiserInput,
    stack: MlpSpec,
    emb_verb: usize,
    emb_part: usize,
    pub schedule: DiffusionSchedule,
    pub space: PoseSpace,
    pub vocab: PartVocab,
    pub config: GenConfig,
    time_table: Tensor,
    pose_dim: usize,
    fingers: usize,
}

impl IdgcModel {
    pub fn new(
        config: &GenConfig,
        vocab: &PartVocab,
        space: PoseSpace,
        fingers: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut init_rng = rng::stream(seed, "idgc/init");
        let mut params = ParamSet::default();
        let pose_dim = space.dim();
        let obj_enc = PointEncoder::register(
            &mut params,
            "obj",
            config.obj_hidden,
            config.obj_feat,
            config.cond_points,
            &mut init_rng,
        );
        let h = config.hidden;
        let input = DenoiserInput {
            w_pose: params.push("den/in/pose", crate::nets::xavier(pose_dim, h, &mut init_rng)),
            w_time: params.push("den/in/time", crate::nets::xavier(config.time_dim, h, &mut init_rng)),
            w_obj: params.push("den/in/obj", crate::nets::xavier(config.obj_feat, h, &mut init_rng)),
            w_verb: params.push("den/in/verb", crate::nets::xavier(config.verb_dim, h, &mut init_rng)),
            w_part: (0..fingers)
                .map(|f| {
                    params.push(
                        &format!("den/in/part{f}"),
                        crate::nets::xavier(config.part_dim, h, &mut init_rng),
                    )
                })
                .collect(),
            bias: params.push("den/in/bias", Tensor::zeros(&[h])),
        };
        let stack = MlpSpec::register(&mut params, "den/stack", &[h, h, h, pose_dim], false, &mut init_rng);
        let emb_verb = params.push(
            "emb/verb",
            crate::nets::xavier(crate::guidance::VERBS.len(), config.verb_dim, &mut init_rng),
        );
        let emb_part =
            params.push("emb/part", crate::nets::xavier(vocab.len(), config.part_dim, &mut init_rng));
        let schedule = DiffusionSchedule::linear(config.t_steps, config.beta_start, config.beta_end)?;
        let time_table = time_embedding_table(config.t_steps, config.time_dim);
        Ok(IdgcModel {
            params,
            obj_enc,
            input,
            stack,
            emb_verb,
            emb_part,
            schedule,
            space,
            vocab: vocab.clone(),
            config: config.clone(),
            time_table,
            pose_dim,
            fingers,
        })
    }

    /// Denoiser forward for a batch: `x_t` rows [B, dim] (flat), per-row
    /// diffusion steps, and per-row condition indices into `conds`.
    #[allow(clippy::too_many_arguments)]
    fn denoise_graph(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        xt: Var,
        t_ids: &[usize],
        conds: &[&Condition],
        cond_of_row: &[usize],
    ) -> Var {
        // encode each distinct condition's object cloud once
        let mut all_points = Vec::new();
        for c in conds {
            all_points.extend_from_slice(&c.cond_points);
        }
        let pts = tape.constant(Tensor::from_rows3(&all_points));
        let feats = self.obj_enc.forward(tape, pts, vars); // [U, obj_feat]
        let obj_rows = tape.gather(feats, cond_of_row);

        let ttab = tape.constant(self.time_table.clone());
        let temb = tape.gather(ttab, t_ids);

        let verb_ids: Vec<usize> = cond_of_row.iter().map(|&c| conds[c].verb_tok).collect();
        let vemb_tab = vars[self.emb_verb];
        let vemb = tape.gather(vemb_tab, &verb_ids);

        let mut h = tape.matmul(xt, vars[self.input.w_pose]);
        let ht = tape.matmul(temb, vars[self.input.w_time]);
        h = tape.add(h, ht);
        let ho = tape.matmul(obj_rows, vars[self.input.w_obj]);
        h = tape.add(h, ho);
        let hv = tape.matmul(vemb, vars[self.input.w_verb]);
        h = tape.add(h, hv);
        for f in 0..self.fingers {
            let part_ids: Vec<usize> =
                cond_of_row.iter().map(|&c| conds[c].part_toks[f]).collect();
            let pemb = tape.gather(vars[self.emb_part], &part_ids);
            let hp = tape.matmul(pemb, vars[self.input.w_part[f]]);
            h = tape.add(h, hp);
        }
        h = tape.add(h, vars[self.input.bias]);
        h = tape.silu(h);
        self.stack.forward(tape, h, vars)
    }

    /// Plain-value denoiser used inside the reverse chain (no gradients).
    fn denoise_values(&self, x: &[f64], t: usize, cond: &Condition, n: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = self.params.constants(&mut tape);
        let xt = tape.constant(Tensor::matrix(n, self.pose_dim, x.to_vec()));
        let t_ids = vec![t; n];
        let rows = vec![0usize; n];
        let out = self.denoise_graph(&mut tape, &vars, xt, &t_ids, &[cond], &rows);
        tape.value(out).data().to_vec()
    }

    /// Draw `n` grasps for one condition by ancestral reverse diffusion.
    pub fn sample(&self, cond: &Condition, n: usize, seed: u64) -> Result<Vec<GraspPose>> {
        let mut srng = rng::stream(seed, "idgc/sample");
        let rows = ddpm_sample(
            &self.schedule,
            |x, t| self.denoise_values(x, t, cond, n),
            n,
            self.pose_dim,
            &mut srng,
        );
        Ok(rows.iter().map(|z| self.space.destandardize(z, cond.scale)).collect())
    }

    pub fn save(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, Tensor)> = self
            .params
            .entries
            .iter()
            .map(|(n, t)| (format!("param/{n}"), t.clone()))
            .collect();
        tensors.push(("space/mu".into(), Tensor::vector(self.space.mu.clone())));
        tensors.push(("space/sigma".into(), Tensor::vector(self.space.sigma.clone())));
        tensors.push(("space/qmin".into(), Tensor::vector(self.space.q_min.clone())));
        tensors.push(("space/qmax".into(), Tensor::vector(self.space.q_max.clone())));
        records::write_checkpoint(&self.config.echo("idgc", &self.vocab), &tensors)
    }

    pub fn load(data: &[u8]) -> Result<Self> {
        let (meta, tensors) = records::read_checkpoint(data)?;
        let kv = parse_echo(&meta);
        if kv.get("kind").map(|s| s.as_str()) != Some("idgc") {
            return Err(Error::Parse("checkpoint is not a diffusion component".into()));
        }
        let (config, vocab) = config_from_echo(&kv)?;
        let space = space_from_tensors(&tensors)?;
        let fingers = 4;
        let mut model = IdgcModel::new(&config, &vocab, space, fingers, 0)?;
        restore_params(&mut model.params, &tensors)?;
        Ok(model)
    }
}

fn config_from_echo(kv: &BTreeMap<String, String>) -> Result<(GenConfig, PartVocab)> {
    let mut config = GenConfig::default();
    let get = |key: &str| -> Result<f64> {
        kv.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse(format!("checkpoint meta missing '{key}'")))
    };
    config.idgc_epochs = get("idgc_epochs")? as usize;
    config.qgc_epochs = get("qgc_epochs")? as usize;
    config.batch_size = get("batch_size")? as usize;
    config.lr_initial = get("lr_initial")?;
    config.lr_final = get("lr_final")?;
    config.weight_decay = get("weight_decay")?;
    config.lambda_para = get("lambda_para")?;
    config.lambda_chamfer = get("lambda_chamfer")?;
    config.idgc_lambda_pen = get("idgc_lambda_pen")?;
    config.qgc_lambda_pen = get("qgc_lambda_pen")?;
    config.qgc_lambda_cmap = get("qgc_lambda_cmap")?;
    config.qgc_lambda_spen = get("qgc_lambda_spen")?;
    config.t_steps = get("t_steps")? as usize;
    config.beta_start = get("beta_start")?;
    config.beta_end = get("beta_end")?;
    config.hidden = get("hidden")? as usize;
    config.time_dim = get("time_dim")? as usize;
    config.obj_feat = get("obj_feat")? as usize;
    config.obj_hidden = get("obj_hidden")? as usize;
    config.verb_dim = get("verb_dim")? as usize;
    config.part_dim = get("part_dim")? as usize;
    config.cond_points = get("cond_points")? as usize;
    config.hand_points = get("hand_points")? as usize;
    config.coarse_per_condition = get("coarse_per_condition")? as usize;
    let vocab = PartVocab::decode(
        kv.get("vocab").ok_or_else(|| Error::Parse("checkpoint meta missing 'vocab'".into()))?,
    );
    Ok((config, vocab))
}

fn space_from_tensors(tensors: &[(String, Tensor)]) -> Result<PoseSpace> {
    let find = |name: &str| -> Result<Vec<f64>> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.data().to_vec())
            .ok_or_else(|| Error::Parse(format!("checkpoint missing tensor '{name}'")))
    };
    Ok(PoseSpace {
        mu: find("space/mu")?,
        sigma: find("space/sigma")?,
        q_min: find("space/qmin")?,
        q_max: find("space/qmax")?,
    })
}

fn restore_params(params: &mut ParamSet, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut restored = params.tensors();
    for (i, (name, slot)) in params.entries.iter().enumerate() {
        let stored = tensors
            .iter()
            .find(|(n, _)| n == &format!("param/{name}"))
            .ok_or_else(|| Error::Parse(format!("checkpoint missing parameter '{name}'")))?;
        if stored.1.shape() != slot.shape() {
            return Err(Error::Parse(format!("parameter '{name}' shape mismatch")));
        }
        restored[i] = stored.1.clone();
    }
    params.set_tensors(restored);
    Ok(())
}

/// One line per logged step plus counters the tests assert on.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub lines: Vec<String>,
    pub pen_loss_evals: usize,
    pub final_para: f64,
    pub final_loss: f64,
}

struct TrainItem {
    z0: Vec<f64>,
    cond_idx: usize,
    scale: f64,
    gt_cloud: Vec<Vec3>,
}

fn train_conditions(
    ds: &Dataset,
    vocab: &PartVocab,
    config: &GenConfig,
) -> Result<(Vec<Condition>, Vec<usize>, Vec<GuidanceSpec>)> {
    // one condition per distinct (object, intent); records map onto them
    let mut conds: Vec<Condition> = Vec::new();
    let mut keys: Vec<(String, String)> = Vec::new();
    let mut guides: Vec<GuidanceSpec> = Vec::new();
    let mut of_record = Vec::new();
    for r in ds.records_of(Split::Train) {
        let key = (r.object_id.clone(), r.guidance.intent_key());
        let idx = match keys.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                let obj = ds
                    .object(&r.object_id)
                    .ok_or_else(|| Error::Contract(format!("unknown object {}", r.object_id)))?;
                conds.push(condition_for(obj, &r.guidance, vocab, config.cond_points)?);
                guides.push(r.guidance.clone());
                keys.push(key);
                conds.len() - 1
            }
        };
        of_record.push(idx);
    }
    Ok((conds, of_record, guides))
}

/// Train the diffusion component on the train split.
pub fn idgc_train(ds: &Dataset, config: &GenConfig, seed: u64) -> Result<(IdgcModel, TrainLog)> {
    let hand = &ds.hand;
    let train: Vec<&GraspRecord> = ds.records_of(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Contract("train split is empty".into()));
    }
    let vocab = PartVocab::from_dataset(ds);
    let scaled: Vec<(GraspPose, f64)> = train
        .iter()
        .map(|r| {
            let scale = ds.object(&r.object_id).map(|o| o.bounding_radius()).unwrap_or(1.0);
            (r.pose.clone(), scale)
        })
        .collect();
    let space = PoseSpace::fit(hand, &scaled)?;
    let mut model = IdgcModel::new(config, &vocab, space, hand.finger_count(), seed)?;
    let (conds, cond_of_record, _) = train_conditions(ds, &vocab, config)?;

    let mut items = Vec::with_capacity(train.len());
    let mut pen_clouds: BTreeMap<String, Vec<Vec3>> = BTreeMap::new();
    for (r, &cond_idx) in train.iter().zip(&cond_of_record) {
        let scale = conds[cond_idx].scale;
        let gt_cloud = hand.forward_kinematics(&r.pose)?.points;
        items.push(TrainItem {
            z0: model.space.standardize(&r.pose, scale),
            cond_idx,
            scale,
            gt_cloud,
        });
        if config.idgc_lambda_pen > 0.0 || config.idgc_pen_switch.is_some() {
            let obj = ds.object(&r.object_id).unwrap();
            pen_clouds
                .entry(r.object_id.clone())
                .or_insert(quality_cloud(obj, QUALITY_CLOUD_POINTS)?);
        }
    }
    let pen_cloud_of: Vec<Option<&Vec<Vec3>>> =
        train.iter().map(|r| pen_clouds.get(&r.object_id)).collect();

    let mut opt = OptimState::for_params(
        &model.params.tensors(),
        LrSchedule::Cosine {
            initial: config.lr_initial,
            final_lr: config.lr_final,
            total_epochs: config.idgc_epochs,
        },
        config.weight_decay,
    );
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 0..config.idgc_epochs {
        let lambda_pen = match config.idgc_pen_switch {
            Some((at, w)) if epoch >= at => w,
            _ => config.idgc_lambda_pen,
        };
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut erng = rng::substream(seed, "idgc/shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            let j = erng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let mut brng = rng::substream(seed, "idgc/noise", step as u64);
            let mut tensors = model.params.tensors();
            let mut tape = Tape::new();
            let vars = model.params.leaves(&mut tape);

            // assemble the noised batch
            let bs = chunk.len();
            let dim = model.pose_dim;
            let mut xt_data = Vec::with_capacity(bs * dim);
            let mut t_ids = Vec::with_capacity(bs);
            let mut z0_data = Vec::with_capacity(bs * dim);
            for &i in chunk {
                let t = brng.gen_range(1..=model.schedule.steps());
                let noise = crate::diffusion::standard_normal(&mut brng, dim);
                let xt = model.schedule.forward_diffuse(&items[i].z0, t, &noise)?;
                xt_data.extend_from_slice(&xt);
                t_ids.push(t);
                z0_data.extend_from_slice(&items[i].z0);
            }
            // conditions present in this batch, deduplicated
            let mut batch_conds: Vec<usize> = chunk.iter().map(|&i| items[i].cond_idx).collect();
            batch_conds.sort_unstable();
            batch_conds.dedup();
            let cond_refs: Vec<&Condition> = batch_conds.iter().map(|&c| &conds[c]).collect();
            let cond_of_row: Vec<usize> = chunk
                .iter()
                .map(|&i| batch_conds.binary_search(&items[i].cond_idx).unwrap())
                .collect();

            let xt = tape.constant(Tensor::matrix(bs, dim, xt_data));
            let x0_hat = model.denoise_graph(&mut tape, &vars, xt, &t_ids, &cond_refs, &cond_of_row);
            let z0 = tape.constant(Tensor::matrix(bs, dim, z0_data));
            let diff = tape.sub(x0_hat, z0);
            let sq = tape.square(diff);
            let para = tape.mean(sq);

            let mut chamfers = Vec::with_capacity(bs);
            let mut pens = Vec::with_capacity(bs);
            for (row, &i) in chunk.iter().enumerate() {
                let zrow = tape.gather(x0_hat, &[row]);
                let zvec = tape.reshape(zrow, &[dim]);
                let (t, r6, q) = model.space.destandardize_graph(&mut tape, zvec, items[i].scale);
                let fk = hand.fk_graph(&mut tape, t, r6, q);
                let gt = tape.constant(Tensor::from_rows3(&items[i].gt_cloud));
                chamfers.push(losses::graph_chamfer(&mut tape, fk.points, gt));
                if lambda_pen > 0.0 {
                    let cloud = pen_cloud_of[i].expect("pen cloud prepared when weighted");
                    let obj_var = tape.constant(Tensor::from_rows3(cloud));
                    pens.push(losses::graph_pen(&mut tape, hand, obj_var, &fk));
                    log.pen_loss_evals += 1;
                }
            }
            let ch_cat = tape.concat(&chamfers);
            let chamfer = tape.mean(ch_cat);
            let para_w = tape.mul_const(para, config.lambda_para);
            let ch_w = tape.mul_const(chamfer, config.lambda_chamfer);
            let mut loss = tape.add(para_w, ch_w);
            let mut pen_val = 0.0;
            if !pens.is_empty() {
                let pen_cat = tape.concat(&pens);
                let pen = tape.mean(pen_cat);
                pen_val = tape.value(pen).item();
                let pen_w = tape.mul_const(pen, lambda_pen);
                loss = tape.add(loss, pen_w);
            }

            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                let at = tape.find_nonfinite();
                return Err(Error::Fault(format!(
                    "diffusion training loss became non-finite at epoch {epoch} step {step} ({at:?})"
                )));
            }
            log.final_para = tape.value(para).item();
            log.final_loss = loss_val;
            tape.backward(loss)?;
            let grads = model.params.grads(&tape, &vars);
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            opt.step(&mut tensors, &grad_refs, epoch)?;
            model.params.set_tensors(tensors);
            if step % 20 == 0 {
                log.lines.push(format!(
                    "component=idgc epoch={epoch} step={step} loss={loss_val:.6} para={:.6} chamfer={:.6} pen={pen_val:.6} lambda_pen={lambda_pen}",
                    log.final_para,
                    tape.value(chamfer).item(),
                ));
            }
            step += 1;
        }
    }
    log.lines.push(format!(
        "component=idgc done steps={step} final_loss={:.6} final_para={:.6}",
        log.final_loss, log.final_para
    ));
    Ok((model, log))
}

/// A refiner training pair: coarse sample matched to its nearest
/// ground-truth grasp with the same intent.
#[derive(Clone, Debug)]
pub struct QgcPair {
    pub object_id: String,
    pub cond: Condition,
    pub coarse: GraspPose,
    pub target: GraspPose,
}

/// Index of the candidate pose whose hand cloud is chamfer-nearest to the
/// query pose's; ties break to the lowest index.
pub fn nearest_by_chamfer(
    hand: &HandModel,
    query: &GraspPose,
    candidates: &[&GraspPose],
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Contract("nearest_by_chamfer over an empty set".into()));
    }
    let q_cloud = hand.forward_kinematics(query)?.points;
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let cloud = hand.forward_kinematics(c)?.points;
        let d = losses::loss_chamfer(&q_cloud, &cloud)?;
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

/// Sample coarse grasps per training condition and match each to the
/// closest ground truth (hand-cloud chamfer) sharing the intent.
pub fn qgc_build_pairs(
    idgc: &IdgcModel,
    ds: &Dataset,
    seed: u64,
) -> Result<(Vec<QgcPair>, Vec<String>)> {
    let hand = &ds.hand;
    let groups = ds.intent_groups(Split::Train);
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for (gi, ((object_id, key), members)) in groups.iter().enumerate() {
        if members.is_empty() {
            warnings.push(format!("intent group ({object_id}, {key}) is empty; skipped"));
            continue;
        }
        let obj = ds
            .object(object_id)
            .ok_or_else(|| Error::Contract(format!("unknown object {object_id}")))?;
        let cond =
            condition_for(obj, &members[0].guidance, &idgc.vocab, idgc.config.cond_points)?;
        let gt_poses: Vec<&GraspPose> = members.iter().map(|r| &r.pose).collect();
        let coarse = idgc.sample(
            &cond,
            idgc.config.coarse_per_condition,
            rng::substream(seed, "qgc/pairs", gi as u64).gen(),
        )?;
        for c in coarse {
            let best = nearest_by_chamfer(hand, &c, &gt_poses)?;
            pairs.push(QgcPair {
                object_id: object_id.clone(),
                cond: cond.clone(),
                coarse: c,
                target: members[best].pose.clone(),
            });
        }
    }
    Ok((pairs, warnings))
}

/// Refiner input blocks.
#[derive(Clone, Debug)]
struct RefinerInput {
    w_pose: usize,
    w_hand: usize,
    w_obj: usize,
    bias: usize,
}

/// The quality refinement component.
pub struct QgcModel {
    pub params: ParamSet,
    obj_enc: PointEncoder,
    hand_enc: PointEncoder,
    input: RefinerInput,
    stack: MlpSpec,
    pub space: PoseSpace,
    pub vocab: PartVocab,
    pub config: GenConfig,
    pose_dim: usize,
}

impl QgcModel {
    pub fn new(config: &GenConfig, vocab: &PartVocab, space: PoseSpace, seed: u64) -> Result<Self> {
        let mut init_rng = rng::stream(seed, "qgc/init");
        let mut params = ParamSet::default();
        let pose_dim = space.dim();
        let obj_enc = PointEncoder::register(
            &mut params,
            "obj",
            config.obj_hidden,
            config.obj_feat,
            config.cond_points,
            &mut init_rng,
        );
        let hand_enc = PointEncoder::register(
            &mut params,
            "hand",
            config.obj_hidden,
            config.obj_feat,
            config.hand_points,
            &mut init_rng,
        );
        let h = config.hidden;
        let input = RefinerInput {
            w_pose: params.push("ref/in/pose", crate::nets::xavier(pose_dim, h, &mut init_rng)),
            w_hand: params.push("ref/in/hand", crate::nets::xavier(config.obj_feat, h, &mut init_rng)),
            w_obj: params.push("ref/in/obj", crate::nets::xavier(config.obj_feat, h, &mut init_rng)),
            bias: params.push("ref/in/bias", Tensor::zeros(&[h])),
        };
        // zero-init head: the refiner starts as the identity map
        let stack = MlpSpec::register(&mut params, "ref/stack", &[h, h, h, pose_dim], true, &mut init_rng);
        Ok(QgcModel {
            params,
            obj_enc,
            hand_enc,
            input,
            stack,
            space,
            vocab: vocab.clone(),
            config: config.clone(),
            pose_dim,
        })
    }

    /// Subsample a hand cloud to the encoder's point count.
    fn hand_subset(&self, cloud: &[Vec3]) -> Vec<Vec3> {
        let n = self.config.hand_points;
        (0..n).map(|i| cloud[i * cloud.len() / n]).collect()
    }

    /// Refined standardized poses for rows of coarse poses (one condition
    /// per row index into `conds`).
    fn refine_graph(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        coarse_z: Var,
        hand_points: Var,
        conds: &[&Condition],
        cond_of_row: &[usize],
    ) -> Var {
        let mut all_points = Vec::new();
        for c in conds {
            all_points.extend_from_slice(&c.cond_points);
        }
        let pts = tape.constant(Tensor::from_rows3(&all_points));
        let feats = self.obj_enc.forward(tape, pts, vars);
        let obj_rows = tape.gather(feats, cond_of_row);
        let hand_feats = self.hand_enc.forward(tape, hand_points, vars);

        let mut h = tape.matmul(coarse_z, vars[self.input.w_pose]);
        let hh = tape.matmul(hand_feats, vars[self.input.w_hand]);
        h = tape.add(h, hh);
        let ho = tape.matmul(obj_rows, vars[self.input.w_obj]);
        h = tape.add(h, ho);
        h = tape.add(h, vars[self.input.bias]);
        h = tape.silu(h);
        let delta = self.stack.forward(tape, h, vars);
        tape.add(coarse_z, delta)
    }

    /// Refine coarse grasps for a single condition.
    pub fn refine(&self, hand: &HandModel, cond: &Condition, coarse: &[GraspPose]) -> Result<Vec<GraspPose>> {
        if coarse.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let vars = self.params.constants(&mut tape);
        let bs = coarse.len();
        let mut z_data = Vec::with_capacity(bs * self.pose_dim);
        let mut hand_pts = Vec::with_capacity(bs * self.config.hand_points);
        for c in coarse {
            z_data.extend(self.space.standardize(c, cond.scale));
            let cloud = hand.forward_kinematics(c)?.points;
            hand_pts.extend(self.hand_subset(&cloud));
        }
        let z = tape.constant(Tensor::matrix(bs, self.pose_dim, z_data));
        let hp = tape.constant(Tensor::from_rows3(&hand_pts));
        let refined = self.refine_graph(&mut tape, &vars, z, hp, &[cond], &vec![0usize; bs]);
        let vals = tape.value(refined);
        Ok(vals
            .data()
            .chunks(self.pose_dim)
            .map(|z| self.space.destandardize(z, cond.scale))
            .collect())
    }

    pub fn save(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, Tensor)> = self
            .params
            .entries
            .iter()
            .map(|(n, t)| (format!("param/{n}"), t.clone()))
            .collect();
        tensors.push(("space/mu".into(), Tensor::vector(self.space.mu.clone())));
        tensors.push(("space/sigma".into(), Tensor::vector(self.space.sigma.clone())));
        tensors.push(("space/qmin".into(), Tensor::vector(self.space.q_min.clone())));
        tensors.push(("space/qmax".into(), Tensor::vector(self.space.q_max.clone())));
        records::write_checkpoint(&self.config.echo("qgc", &self.vocab), &tensors)
    }

    pub fn load(data: &[u8]) -> Result<Self> {
        let (meta, tensors) = records::read_checkpoint(data)?;
        let kv = parse_echo(&meta);
        if kv.get("kind").map(|s| s.as_str()) != Some("qgc") {
            return Err(Error::Parse("checkpoint is not a refiner component".into()));
        }
        let (config, vocab) = config_from_echo(&kv)?;
        let space = space_from_tensors(&tensors)?;
        let mut model = QgcModel::new(&config, &vocab, space, 0)?;
        restore_params(&mut model.params, &tensors)?;
        Ok(model)
    }
}

/// Train the refiner on matched (coarse, target) pairs.
pub fn qgc_train(
    pairs: &[QgcPair],
    ds: &Dataset,
    idgc: &IdgcModel,
    seed: u64,
) -> Result<(QgcModel, TrainLog)> {
    if pairs.is_empty() {
        return Err(Error::Contract("no refiner training pairs".into()));
    }
    let hand = &ds.hand;
    let config = &idgc.config;
    let mut model = QgcModel::new(config, &idgc.vocab, idgc.space.clone(), seed)?;

    struct PairItem {
        coarse_z: Vec<f64>,
        hand_subset: Vec<Vec3>,
        target_z: Vec<f64>,
        target_cloud: Vec<Vec3>,
        target_cmap: Vec<f64>,
        quality_cloud: Vec<Vec3>,
        scale: f64,
        cond_idx: usize,
    }
    let mut conds: Vec<Condition> = Vec::new();
    let mut cond_keys: Vec<String> = Vec::new();
    let mut quality: BTreeMap<String, Vec<Vec3>> = BTreeMap::new();
    let mut items = Vec::with_capacity(pairs.len());
    for p in pairs {
        let cond_idx = match cond_keys.iter().position(|k| *k == p.cond.object_id) {
            // conditions with the same object share the cloud; tokens are
            // not used by the refiner
            Some(i) => i,
            None => {
                cond_keys.push(p.cond.object_id.clone());
                conds.push(p.cond.clone());
                conds.len() - 1
            }
        };
        let obj = ds.object(&p.object_id).unwrap();
        let qcloud = quality
            .entry(p.object_id.clone())
            .or_insert(quality_cloud(obj, QUALITY_CLOUD_POINTS)?)
            .clone();
        let coarse_cloud = hand.forward_kinematics(&p.coarse)?.points;
        let target_cloud = hand.forward_kinematics(&p.target)?.points;
        let target_cmap = losses::compute_contact_map(&qcloud, &target_cloud);
        items.push(PairItem {
            coarse_z: model.space.standardize(&p.coarse, p.cond.scale),
            hand_subset: model.hand_subset(&coarse_cloud),
            target_z: model.space.standardize(&p.target, p.cond.scale),
            target_cloud,
            target_cmap,
            quality_cloud: qcloud,
            scale: p.cond.scale,
            cond_idx,
        });
    }

    let mut opt = OptimState::for_params(
        &model.params.tensors(),
        LrSchedule::Cosine {
            initial: config.lr_initial,
            final_lr: config.lr_final,
            total_epochs: config.qgc_epochs,
        },
        config.weight_decay,
    );
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 0..config.qgc_epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut erng = rng::substream(seed, "qgc/shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            let j = erng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let mut tensors = model.params.tensors();
            let mut tape = Tape::new();
            let vars = model.params.leaves(&mut tape);
            let bs = chunk.len();
            let dim = model.pose_dim;
            let mut z_data = Vec::with_capacity(bs * dim);
            let mut hand_pts = Vec::with_capacity(bs * config.hand_points);
            let mut tz_data = Vec::with_capacity(bs * dim);
            for &i in chunk {
                z_data.extend_from_slice(&items[i].coarse_z);
                hand_pts.extend_from_slice(&items[i].hand_subset);
                tz_data.extend_from_slice(&items[i].target_z);
            }
            let mut batch_conds: Vec<usize> = chunk.iter().map(|&i| items[i].cond_idx).collect();
            batch_conds.sort_unstable();
            batch_conds.dedup();
            let cond_refs: Vec<&Condition> = batch_conds.iter().map(|&c| &conds[c]).collect();
            let cond_of_row: Vec<usize> = chunk
                .iter()
                .map(|&i| batch_conds.binary_search(&items[i].cond_idx).unwrap())
                .collect();

            let z = tape.constant(Tensor::matrix(bs, dim, z_data));
            let hp = tape.constant(Tensor::from_rows3(&hand_pts));
            let refined = model.refine_graph(&mut tape, &vars, z, hp, &cond_refs, &cond_of_row);
            let tz = tape.constant(Tensor::matrix(bs, dim, tz_data));
            let diff = tape.sub(refined, tz);
            let sq = tape.square(diff);
            let para = tape.mean(sq);

            let mut chamfers = Vec::with_capacity(bs);
            let mut pens = Vec::with_capacity(bs);
            let mut cmaps = Vec::with_capacity(bs);
            let mut spens = Vec::with_capacity(bs);
            for (row, &i) in chunk.iter().enumerate() {
                let zrow = tape.gather(refined, &[row]);
                let zvec = tape.reshape(zrow, &[dim]);
                let (t, r6, q) = model.space.destandardize_graph(&mut tape, zvec, items[i].scale);
                let fk = hand.fk_graph(&mut tape, t, r6, q);
                let gt = tape.constant(Tensor::from_rows3(&items[i].target_cloud));
                chamfers.push(losses::graph_chamfer(&mut tape, fk.points, gt));
                let qv = tape.constant(Tensor::from_rows3(&items[i].quality_cloud));
                pens.push(losses::graph_pen(&mut tape, hand, qv, &fk));
                let cm = losses::graph_contact_map(&mut tape, qv, fk.points);
                let cm_t = tape.constant(Tensor::vector(items[i].target_cmap.clone()));
                cmaps.push(losses::graph_cmap_loss(&mut tape, cm, cm_t));
                spens.push(losses::graph_spen(&mut tape, hand, &fk));
            }
            let mean_of = |tape: &mut Tape, xs: &[Var]| {
                let cat = tape.concat(xs);
                tape.mean(cat)
            };
            let chamfer = mean_of(&mut tape, &chamfers);
            let pen = mean_of(&mut tape, &pens);
            let cmap = mean_of(&mut tape, &cmaps);
            let spen = mean_of(&mut tape, &spens);
            let para_w = tape.mul_const(para, config.lambda_para);
            let ch_w = tape.mul_const(chamfer, config.lambda_chamfer);
            let pen_w = tape.mul_const(pen, config.qgc_lambda_pen);
            let cm_w = tape.mul_const(cmap, config.qgc_lambda_cmap);
            let sp_w = tape.mul_const(spen, config.qgc_lambda_spen);
            let s1 = tape.add(para_w, ch_w);
            let s2 = tape.add(pen_w, cm_w);
            let s12 = tape.add(s1, s2);
            let loss = tape.add(s12, sp_w);
            log.pen_loss_evals += bs;

            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                let at = tape.find_nonfinite();
                return Err(Error::Fault(format!(
                    "refiner training loss became non-finite at epoch {epoch} step {step} ({at:?})"
                )));
            }
            log.final_para = tape.value(para).item();
            log.final_loss = loss_val;
            tape.backward(loss)?;
            let grads = model.params.grads(&tape, &vars);
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            opt.step(&mut tensors, &grad_refs, epoch)?;
            model.params.set_tensors(tensors);
            if step % 10 == 0 {
                log.lines.push(format!(
                    "component=qgc epoch={epoch} step={step} loss={loss_val:.6} para={:.6} pen={:.6}",
                    log.final_para,
                    tape.value(pen).item(),
                ));
            }
            step += 1;
        }
    }
    log.lines.push(format!(
        "component=qgc done steps={step} final_loss={:.6}",
        log.final_loss
    ));
    Ok((model, log))
}

/// Sample `n` refined grasps: reverse diffusion then per-sample refinement.
pub fn generate(
    idgc: &IdgcModel,
    qgc: Option<&QgcModel>,
    hand: &HandModel,
    cond: &Condition,
    n: usize,
    seed: u64,
) -> Result<Vec<GraspPose>> {
    let coarse = idgc.sample(cond, n, seed)?;
    match qgc {
        Some(q) => q.refine(hand, cond, &coarse),
        None => Ok(coarse),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, ForgeConfig};

    fn tiny_dataset() -> Dataset {
        let cfg = ForgeConfig {
            objects_per_category: 2,
            grasps_per_object: 4,
            categories: vec!["bottle".into()],
            max_failure_rate: 0.5,
            ..ForgeConfig::default()
        };
        generate_dataset(&cfg, 21).unwrap()
    }

    fn smoke_config() -> GenConfig {
        GenConfig {
            idgc_epochs: 2,
            qgc_epochs: 2,
            batch_size: 8,
            hidden: 32,
            obj_hidden: 16,
            obj_feat: 24,
            cond_points: 16,
            hand_points: 16,
            t_steps: 10,
            coarse_per_condition: 2,
            ..GenConfig::default()
        }
    }

    #[test]
    fn idgc_smoke_trains_and_samples_deterministically() {
        let ds = tiny_dataset();
        let (model, log) = idgc_train(&ds, &smoke_config(), 3).unwrap();
        assert_eq!(log.pen_loss_evals, 0, "penetration loss must not be evaluated");
        assert!(log.final_loss.is_finite());
        let r = ds.records_of(Split::Train).next().unwrap();
        let obj = ds.object(&r.object_id).unwrap();
        let cond = condition_for(obj, &r.guidance, &model.vocab, model.config.cond_points).unwrap();
        let a = model.sample(&cond, 3, 5).unwrap();
        let b = model.sample(&cond, 3, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
    }

    #[test]
    fn idgc_checkpoint_roundtrip() {
        let ds = tiny_dataset();
        let (model, _) = idgc_train(&ds, &smoke_config(), 3).unwrap();
        let bytes = model.save();
        let back = IdgcModel::load(&bytes).unwrap();
        assert_eq!(back.save(), bytes);
        // the restored model must sample identically
        let r = ds.records_of(Split::Train).next().unwrap();
        let obj = ds.object(&r.object_id).unwrap();
        let cond = condition_for(obj, &r.guidance, &model.vocab, model.config.cond_points).unwrap();
        let a = model.sample(&cond, 2, 9).unwrap();
        let b = back.sample(&cond, 2, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
    }

    #[test]
    fn zero_initialized_refiner_is_identity() {
        let ds = tiny_dataset();
        let cfg = smoke_config();
        let vocab = PartVocab::from_dataset(&ds);
        let scaled: Vec<(GraspPose, f64)> = ds
            .records_of(Split::Train)
            .map(|r| (r.pose.clone(), ds.object(&r.object_id).unwrap().bounding_radius()))
            .collect();
        let space = PoseSpace::fit(&ds.hand, &scaled).unwrap();
        let qgc = QgcModel::new(&cfg, &vocab, space, 7).unwrap();
        let r = ds.records_of(Split::Train).next().unwrap();
        let obj = ds.object(&r.object_id).unwrap();
        let cond = condition_for(obj, &r.guidance, &vocab, cfg.cond_points).unwrap();
        let refined = qgc.refine(&ds.hand, &cond, &[r.pose.clone()]).unwrap();
        // standardize/destandardize roundtrip is the only difference
        for (a, b) in refined[0].to_vec().iter().zip(r.pose.to_vec()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

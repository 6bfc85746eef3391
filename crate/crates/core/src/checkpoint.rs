//! Binary checkpoints (format version 1).
//!
//! All integers and floats are little-endian; `str` is a `u32` byte length
//! followed by UTF-8 bytes.
//!
//! ```text
//! magic      "MTCB"
//! version    u32 = 1
//! encoder    7 x u64 (num_layers, hidden_dim, num_heads, ffn_dim,
//!            vocab_size, max_seq_len, num_segments), 2 x f64 (dropout_rate,
//!            init_std)
//! manifest   u32 n; per task: str task_id, u8 head_kind, u64 batch_size,
//!            u32 label count, str per label, u64 out_dim, source
//!            (u8 0: str train, str test | u8 1: 4 x u64 n_train, n_test,
//!            seed, vocab_size)
//! trainer    f64 alpha, u8 optimizer, 3 x f64 adam betas/eps,
//!            u64 outer_loops, u64 seed, u8 schedule;
//!            4 x u64 progress (outer_loop, iteration, slot, step),
//!            n x u64 drawn, n x 3 x u64 iterator (epoch, pos, wraps);
//!            u8 sampler flag [+ 32 bytes seed, u64 stream, u128 word_pos];
//!            u32 m; per Adam moment: str name, u64 step
//! tensors    u32 count; per tensor sorted by name: str name, u8 dtype
//!            (1 = f64), u32 rank, rank x u64 dims, f64 payload
//! ```
//!
//! Adam moments are stored as tensors `optim.m.<param>` / `optim.v.<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, AdamConfig, Moments, Optimizer, Parameters, Tensor};
use crate::data::{DataSource, IterState};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::heads::{HeadKind, HeadParams, TaskSpec};
use crate::trainer::{OptimizerKind, Progress, Schedule, Trainer, TrainerConfig};

pub const MAGIC: &[u8; 4] = b"MTCB";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const MOMENT_M: &str = "optim.m.";
const MOMENT_V: &str = "optim.v.";

/// Everything needed to resume training or serve predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderParams,
    pub tasks: Vec<TaskSpec>,
    pub heads: Vec<HeadParams>,
    pub config: TrainerConfig,
    pub progress: Progress,
    pub iters: Vec<IterState>,
    pub sampler: Option<ChaCha8Rng>,
    pub optimizer: Optimizer,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            encoder: t.encoder.clone(),
            tasks: t.tasks.clone(),
            heads: t.heads.clone(),
            config: t.config.clone(),
            progress: t.progress.clone(),
            iters: t.iters.iter().map(|i| i.state()).collect(),
            sampler: t.sampler.clone(),
            optimizer: t.optimizer.clone(),
        }
    }

    /// Rebuilds a trainer over datasets with the given training sizes.
    pub fn into_trainer(self, train_sizes: &[usize]) -> Result<Trainer> {
        let mut t = Trainer::with_params(self.config, self.encoder, self.tasks, self.heads, train_sizes)?;
        for (it, st) in t.iters.iter_mut().zip(&self.iters) {
            it.set_state(*st)?;
        }
        if self.progress.drawn.len() != t.tasks.len() {
            return Err(Error::Corrupt("progress counters do not match the task count".into()));
        }
        t.progress = self.progress;
        t.sampler = self.sampler;
        t.optimizer = self.optimizer;
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let c = &self.encoder.config;
        for v in [c.num_layers, c.hidden_dim, c.num_heads, c.ffn_dim, c.vocab_size, c.max_seq_len, c.num_segments] {
            w.u64(v as u64);
        }
        w.f64(c.dropout_rate);
        w.f64(c.init_std);

        w.u32(self.tasks.len() as u32);
        for (t, h) in self.tasks.iter().zip(&self.heads) {
            w.str(&t.task_id);
            w.u8(t.head_kind.code());
            w.u64(t.batch_size as u64);
            w.u32(t.label_names.len() as u32);
            t.label_names.iter().for_each(|l| w.str(l));
            w.u64(h.out_dim() as u64);
            match &t.source {
                DataSource::Files { train, test } => {
                    w.u8(0);
                    w.str(&train.to_string_lossy());
                    w.str(&test.to_string_lossy());
                }
                DataSource::Synthetic {
                    n_train,
                    n_test,
                    seed,
                    vocab_size,
                } => {
                    w.u8(1);
                    for v in [*n_train as u64, *n_test as u64, *seed, *vocab_size as u64] {
                        w.u64(v);
                    }
                }
            }
        }

        let tc = &self.config;
        w.f64(tc.alpha);
        w.u8(match tc.optimizer {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => 1,
        });
        w.f64(tc.adam.beta1);
        w.f64(tc.adam.beta2);
        w.f64(tc.adam.eps);
        w.u64(tc.outer_loops as u64);
        w.u64(tc.seed);
        w.u8(tc.schedule.code());
        let p = &self.progress;
        for v in [p.outer_loop, p.iteration, p.slot as u64, p.step] {
            w.u64(v);
        }
        p.drawn.iter().for_each(|&d| w.u64(d));
        for s in &self.iters {
            w.u64(s.epoch);
            w.u64(s.pos as u64);
            w.u64(s.wraps);
        }
        match &self.sampler {
            None => w.u8(0),
            Some(r) => {
                w.u8(1);
                w.0.extend_from_slice(&r.get_seed());
                w.u64(r.get_stream());
                w.0.extend_from_slice(&r.get_word_pos().to_le_bytes());
            }
        }

        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        for prm in self.encoder.params().into_iter().chain(self.heads.iter().flat_map(|h| h.params())) {
            tensors.insert(prm.name.clone(), prm.value.clone());
        }
        match &self.optimizer {
            Optimizer::Sgd => w.u32(0),
            Optimizer::Adam(a) => {
                w.u32(a.moments.len() as u32);
                for (name, m) in &a.moments {
                    w.str(name);
                    w.u64(m.step);
                    let shape = tensors.get(name).map_or_else(|| vec![m.m.len()], |t| t.shape().to_vec());
                    tensors.insert(format!("{MOMENT_M}{name}"), Tensor::new(shape.clone(), m.m.clone()).expect("moment shape"));
                    tensors.insert(format!("{MOMENT_V}{name}"), Tensor::new(shape, m.v.clone()).expect("moment shape"));
                }
            }
        }
        w.u32(tensors.len() as u32);
        for (name, t) in &tensors {
            w.str(name);
            w.u8(DTYPE_F64);
            w.u32(t.rank() as u32);
            t.shape().iter().for_each(|&d| w.u64(d as u64));
            for v in t.data() {
                w.f64(*v);
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing MTCB magic".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = r.usize("encoder config")?;
        }
        let config = EncoderConfig {
            num_layers: dims[0],
            hidden_dim: dims[1],
            num_heads: dims[2],
            ffn_dim: dims[3],
            vocab_size: dims[4],
            max_seq_len: dims[5],
            num_segments: dims[6],
            dropout_rate: r.f64("encoder config")?,
            init_std: r.f64("encoder config")?,
        };
        config.validate().map_err(|e| Error::Corrupt(format!("encoder config: {e}")))?;

        let n = r.u32("manifest")? as usize;
        let mut tasks = Vec::with_capacity(n);
        let mut out_dims = Vec::with_capacity(n);
        for _ in 0..n {
            let task_id = r.str("manifest")?;
            let kind = HeadKind::from_code(r.u8("manifest")?).ok_or_else(|| Error::Corrupt("unknown head kind".into()))?;
            let batch_size = r.usize("manifest")?;
            let nl = r.u32("manifest")? as usize;
            let labels = (0..nl).map(|_| r.str("manifest")).collect::<Result<Vec<_>>>()?;
            out_dims.push(r.usize("manifest")?);
            let source = match r.u8("manifest")? {
                0 => DataSource::Files {
                    train: PathBuf::from(r.str("manifest")?),
                    test: PathBuf::from(r.str("manifest")?),
                },
                1 => DataSource::Synthetic {
                    n_train: r.usize("manifest")?,
                    n_test: r.usize("manifest")?,
                    seed: r.u64("manifest")?,
                    vocab_size: r.usize("manifest")?,
                },
                s => return Err(Error::Corrupt(format!("unknown data source tag {s}"))),
            };
            let spec = TaskSpec::new(task_id, kind, labels, batch_size, source)
                .map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
            if spec.out_dim() != *out_dims.last().unwrap() {
                return Err(Error::Corrupt(format!("manifest out_dim of task {:?} disagrees with its labels", spec.task_id)));
            }
            tasks.push(spec);
        }

        let alpha = r.f64("trainer")?;
        let optimizer_kind = match r.u8("trainer")? {
            0 => OptimizerKind::Sgd,
            1 => OptimizerKind::Adam,
            o => return Err(Error::Corrupt(format!("unknown optimizer tag {o}"))),
        };
        let adam = AdamConfig {
            beta1: r.f64("trainer")?,
            beta2: r.f64("trainer")?,
            eps: r.f64("trainer")?,
        };
        let outer_loops = r.usize("trainer")?;
        let seed = r.u64("trainer")?;
        let schedule = Schedule::from_code(r.u8("trainer")?).ok_or_else(|| Error::Corrupt("unknown schedule".into()))?;
        let tconfig = TrainerConfig {
            alpha,
            optimizer: optimizer_kind,
            adam,
            outer_loops,
            seed,
            schedule,
        };
        let mut progress = Progress {
            outer_loop: r.u64("progress")?,
            iteration: r.u64("progress")?,
            slot: r.usize("progress")?,
            step: r.u64("progress")?,
            drawn: Vec::with_capacity(n),
        };
        for _ in 0..n {
            progress.drawn.push(r.u64("progress")?);
        }
        let mut iters = Vec::with_capacity(n);
        for _ in 0..n {
            iters.push(IterState {
                epoch: r.u64("iterator state")?,
                pos: r.usize("iterator state")?,
                wraps: r.u64("iterator state")?,
            });
        }
        let sampler = match r.u8("sampler")? {
            0 => None,
            1 => {
                let seed: [u8; 32] = r.take(32, "sampler")?.try_into().expect("32 bytes");
                let stream = r.u64("sampler")?;
                let word_pos = u128::from_le_bytes(r.take(16, "sampler")?.try_into().expect("16 bytes"));
                let mut g = ChaCha8Rng::from_seed(seed);
                g.set_stream(stream);
                g.set_word_pos(word_pos);
                Some(g)
            }
            s => return Err(Error::Corrupt(format!("bad sampler flag {s}"))),
        };
        let nm = r.u32("optimizer state")? as usize;
        let mut steps = Vec::with_capacity(nm);
        for _ in 0..nm {
            steps.push((r.str("optimizer state")?, r.u64("optimizer state")?));
        }

        let count = r.u32("tensor table")? as usize;
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let name = r.str("tensor table")?;
            let dtype = r.u8(&name)?;
            if dtype != DTYPE_F64 {
                return Err(Error::Corrupt(format!("tensor {name}: unsupported dtype {dtype}")));
            }
            let rank = r.u32(&name)? as usize;
            let shape = (0..rank).map(|_| r.usize(&name)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&l| l <= r.remaining() / 8)
                .ok_or_else(|| Error::Corrupt(format!("tensor {name}: payload truncated")))?;
            let payload = r.take(len * 8, &name)?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("tensor {name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Corrupt(format!("tensor {name} stored twice")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Corrupt(format!("{} trailing bytes", r.remaining())));
        }

        let mut encoder = EncoderParams::init(&config, 0)?;
        let mut heads: Vec<HeadParams> = tasks
            .iter()
            .zip(&out_dims)
            .map(|(t, &o)| HeadParams::zeros(&t.task_id, config.hidden_dim, o))
            .collect();
        let mut restore = |p: &mut crate::autodiff::Param| -> Result<()> {
            let t = tensors
                .remove(&p.name)
                .ok_or_else(|| Error::Corrupt(format!("tensor {} missing", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Corrupt(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
            Ok(())
        };
        for p in encoder.params_mut() {
            restore(p)?;
        }
        for h in &mut heads {
            for p in h.params_mut() {
                restore(p)?;
            }
        }
        let optimizer = match optimizer_kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => {
                let mut a = Adam::new(adam);
                for (name, step) in steps {
                    let mut take = |prefix: &str| {
                        tensors
                            .remove(&format!("{prefix}{name}"))
                            .ok_or_else(|| Error::Corrupt(format!("tensor {prefix}{name} missing")))
                    };
                    let m = take(MOMENT_M)?.into_data();
                    let v = take(MOMENT_V)?.into_data();
                    if m.len() != v.len() {
                        return Err(Error::Corrupt(format!("moments of {name} differ in length")));
                    }
                    a.moments.insert(name, Moments { step, m, v });
                }
                Optimizer::Adam(a)
            }
        };
        if let Some(name) = tensors.keys().next() {
            return Err(Error::Corrupt(format!("unexpected tensor {name}")));
        }
        Ok(Checkpoint {
            encoder,
            tasks,
            heads,
            config: tconfig,
            progress,
            iters,
            sampler,
            optimizer,
        })
    }
}

/// Writes `ckpt` atomically (temporary file in the same directory, then
/// rename).
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidInput, "checkpoint path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Corrupt(format!("{what}: truncated")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Corrupt(format!("{what}: value out of range")))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Corrupt(format!("{what}: invalid UTF-8")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{prepare, synth_labels, TaskData};
    use crate::trainer::TrainLog;

    fn setup(schedule: Schedule, optimizer: OptimizerKind) -> (Trainer, Vec<TaskData>) {
        let specs: Vec<TaskSpec> = [(HeadKind::Ner, 0), (HeadKind::Sts, 0), (HeadKind::Nli, 2)]
            .iter()
            .enumerate()
            .map(|(i, &(k, c))| {
                TaskSpec::new(
                    format!("task{i}"),
                    k,
                    synth_labels(k, c),
                    3,
                    DataSource::Synthetic {
                        n_train: 7 + 2 * i,
                        n_test: 6,
                        seed: i as u64,
                        vocab_size: 20,
                    },
                )
                .unwrap()
            })
            .collect();
        let (_, data) = prepare(&specs, 80, 32).unwrap();
        let enc = EncoderConfig {
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 80,
            max_seq_len: 32,
            num_segments: 2,
            dropout_rate: 0.1,
            init_std: 0.1,
        };
        let cfg = TrainerConfig {
            alpha: 1e-2,
            optimizer,
            outer_loops: 3,
            seed: 4,
            schedule,
            ..TrainerConfig::default()
        };
        let sizes: Vec<usize> = data.iter().map(|d| d.train.len()).collect();
        (Trainer::new(cfg, &enc, specs, &sizes).unwrap(), data)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (mut t, data) = setup(Schedule::Proportional, OptimizerKind::Adam);
        for _ in 0..5 {
            t.step(&data).unwrap();
        }
        let c = Checkpoint::from_trainer(&t);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn save_is_deterministic_and_atomic() {
        let (t, _) = setup(Schedule::RoundRobin, OptimizerKind::Sgd);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let c = Checkpoint::from_trainer(&t);
        save(&c, &a).unwrap();
        save(&c, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        save(&load(&a).unwrap(), &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
        assert!(matches!(save(&c, &dir.path().join("missing/x.ckpt")), Err(Error::Io(_))));
    }

    #[test]
    fn file_size_matches_layout() {
        let (t, _) = setup(Schedule::RoundRobin, OptimizerKind::Sgd);
        let c = Checkpoint::from_trainer(&t);
        let n = c.tasks.len();
        let s = |x: &str| 4 + x.len();
        let mut expected = 4 + 4 + 7 * 8 + 2 * 8;
        expected += 4;
        for task in &c.tasks {
            expected += s(&task.task_id) + 1 + 8 + 4 + task.label_names.iter().map(|l| s(l)).sum::<usize>() + 8;
            expected += 1 + 4 * 8;
        }
        expected += 8 + 1 + 3 * 8 + 8 + 8 + 1;
        expected += 4 * 8 + n * 8 + n * 3 * 8 + 1 + 4;
        expected += 4;
        let params: Vec<&crate::autodiff::Param> =
            c.encoder.params().into_iter().chain(c.heads.iter().flat_map(|h| h.params())).collect();
        for p in params {
            expected += s(&p.name) + 1 + 4 + 8 * p.value.rank() + 8 * p.value.len();
        }
        assert_eq!(c.to_bytes().len(), expected);
    }

    #[test]
    fn rejects_bad_files() {
        let (t, _) = setup(Schedule::RoundRobin, OptimizerKind::Adam);
        let bytes = Checkpoint::from_trainer(&t).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Version { found: 2, expected: 1 })));
        let cut = &bytes[..bytes.len() - 5];
        match Checkpoint::from_bytes(cut) {
            Err(Error::Corrupt(m)) => assert!(m.contains("tensor "), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    fn resume_matches(schedule: Schedule, optimizer: OptimizerKind) {
        let (mut unbroken, data) = setup(schedule, optimizer);
        let mut full = TrainLog::default();
        while let Some(r) = unbroken.step(&data).unwrap() {
            full.records.push(r);
        }
        let (mut first, _) = setup(schedule, optimizer);
        let k = 7;
        for _ in 0..k {
            first.step(&data).unwrap();
        }
        let bytes = Checkpoint::from_trainer(&first).to_bytes();
        let sizes: Vec<usize> = data.iter().map(|d| d.train.len()).collect();
        let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().into_trainer(&sizes).unwrap();
        let mut tail = TrainLog::default();
        while let Some(r) = resumed.step(&data).unwrap() {
            tail.records.push(r);
        }
        let full_tail = TrainLog {
            records: full.records[k..].to_vec(),
            metrics: vec![],
        };
        assert_eq!(tail.to_tsv(), full_tail.to_tsv());
        assert_eq!(resumed.encoder, unbroken.encoder);
    }

    #[test]
    fn resume_equivalence() {
        resume_matches(Schedule::RoundRobin, OptimizerKind::Adam);
        resume_matches(Schedule::Proportional, OptimizerKind::Sgd);
    }
}

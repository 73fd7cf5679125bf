//! Key-value prompt retrieval: a frozen-backbone query picks one task by
//! cosine similarity against per-task keys, and only that task's prompt and
//! prototypes are used afterwards.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::data::{ClassId, Sample, Task};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::learner::{best_score, fused_feature, task_rng, task_scores, ContinualLearner, PromptPrototypeModel, TaskOutcome, TrainConfig};
use crate::optim::SgdCosine;
use crate::tensor::{self, Tensor};

pub const KEY_INIT_STD: f64 = 0.02;
const KEY_PARAM: &str = "key";
/// Offset that keeps key initialisation on its own random stream.
const KEY_STREAM_OFFSET: usize = 1 << 20;

/// One learnable key per trained task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyPool {
    keys: BTreeMap<usize, Tensor>,
}

impl KeyPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_keys(keys: BTreeMap<usize, Tensor>) -> Result<Self> {
        let mut pool = Self::new();
        for (t, k) in keys {
            pool.insert(t, k)?;
        }
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, task: usize) -> Option<&Tensor> {
        self.keys.get(&task)
    }

    pub fn keys(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.keys.iter().map(|(&t, k)| (t, k))
    }

    pub fn insert(&mut self, task: usize, key: Tensor) -> Result<()> {
        if self.keys.contains_key(&task) {
            return Err(Error::Protocol(format!("task {task} already has a key")));
        }
        if let Some((_, first)) = self.keys.iter().next() {
            if first.numel() != key.numel() {
                return Err(Error::dim("key pool", format!("key width {} vs {}", key.numel(), first.numel())));
            }
        }
        self.keys.insert(task, key);
        Ok(())
    }
}

/// The query is the prompt-free feature of the frozen backbone.
pub fn compute_query(x: &[f64], params: &EncoderParams) -> Result<Tensor> {
    params.encode(x, None)
}

/// Fit a key to minimise `1 - mean cos(q, k)` over the task's training
/// queries with the prompt optimiser settings.
pub fn train_keys(task_id: usize, samples: &[Sample], params: &EncoderParams, config: &TrainConfig) -> Result<Tensor> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract(format!("task {task_id} has no training samples for its key")));
    }
    let queries = samples
        .iter()
        .map(|s| compute_query(&s.x, params))
        .collect::<Result<Vec<_>>>()?;
    fit_key(task_id, &queries, config)
}

/// Key fitting on precomputed queries.
pub fn fit_key(task_id: usize, queries: &[Tensor], config: &TrainConfig) -> Result<Tensor> {
    if queries.is_empty() {
        return Err(Error::Contract(format!("task {task_id} has no queries")));
    }
    let d = queries[0].numel();
    let mut rng = task_rng(config.seed, KEY_STREAM_OFFSET + task_id);
    let mut params = BTreeMap::from([(KEY_PARAM.to_string(), Tensor::randn(&[d], KEY_INIT_STD, &mut rng))]);
    let steps = config.epochs * queries.len().div_ceil(config.batch_size);
    if steps == 0 {
        return Ok(params.remove(KEY_PARAM).expect("inserted"));
    }
    let mut opt = SgdCosine::new(config.lr, config.weight_decay, steps)?;
    let mut order: Vec<usize> = (0..queries.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let rows: Vec<&Tensor> = batch.iter().map(|&i| &queries[i]).collect();
            let mut tape = Tape::new();
            let q = tape.constant(Tensor::concat_rows(&rows)?);
            let k = tape.param(KEY_PARAM, params[KEY_PARAM].clone())?;
            let cos = tape.cosine_rows(q, k)?;
            let total = tape.sum(cos);
            let mean = tape.scale(total, -1.0 / batch.len() as f64);
            let loss = tape.add_const(mean, 1.0);
            let grads = tape.backward(loss)?;
            opt.apply(&mut params, &grads)?;
        }
    }
    let key = params.remove(KEY_PARAM).expect("inserted");
    if !key.all_finite() {
        return Err(Error::NonFinite("key"));
    }
    Ok(key)
}

/// Task whose key is most cosine-similar to `q`; ties go to the lowest id.
pub fn select_prompt_by_key(q: &Tensor, pool: &KeyPool) -> Result<usize> {
    let qn = q.norm();
    if qn == 0.0 {
        return Err(Error::ZeroNorm("query"));
    }
    let mut best: Option<(usize, f64)> = None;
    for (task, k) in pool.keys() {
        if k.numel() != q.numel() {
            return Err(Error::dim("select_prompt_by_key", format!("query {} vs key {}", q.numel(), k.numel())));
        }
        let kn = k.norm();
        if kn == 0.0 {
            return Err(Error::ZeroNorm("key"));
        }
        let cos = tensor::dot(q.data(), k.data()) / (qn * kn);
        if best.is_none_or(|(_, b)| cos > b) {
            best = Some((task, cos));
        }
    }
    best.map(|(t, _)| t).ok_or_else(|| Error::Contract("key pool is empty".into()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KvPrediction {
    pub class: ClassId,
    pub selected_task: usize,
    pub score: f64,
}

/// Retrieve one task by key, then classify among that task's classes only.
pub fn kv_predict(model: &PromptPrototypeModel, pool: &KeyPool, x: &[f64]) -> Result<KvPrediction> {
    let q = compute_query(x, model.params())?;
    let task = select_prompt_by_key(&q, pool)?;
    let prompt = model
        .prompts()
        .iter()
        .find(|p| p.task_id == task)
        .ok_or_else(|| Error::Contract(format!("no prompt for retrieved task {task}")))?;
    let fused = fused_feature(model.params(), prompt, &q, x, model.bank().fusion())?;
    let scores = task_scores(model.bank(), task, &fused)?;
    let best = best_score(&scores).ok_or_else(|| Error::Contract(format!("task {task} has no prototypes")))?;
    Ok(KvPrediction {
        class: best.class,
        selected_task: task,
        score: best.score,
    })
}

/// ProP's prompts and prototypes with key-based retrieval in front.
#[derive(Debug, Clone, PartialEq)]
pub struct KvModel {
    inner: PromptPrototypeModel,
    keys: KeyPool,
}

impl KvModel {
    pub fn new(params: EncoderParams, config: TrainConfig) -> Result<Self> {
        Ok(Self {
            inner: PromptPrototypeModel::new(params, config)?,
            keys: KeyPool::new(),
        })
    }

    pub fn from_parts(inner: PromptPrototypeModel, keys: KeyPool) -> Result<Self> {
        let tasks = inner.bank().tasks();
        if keys.keys().map(|(t, _)| t).ne(tasks.iter().copied()) {
            return Err(Error::Contract("keys and trained tasks differ".into()));
        }
        Ok(Self { inner, keys })
    }

    pub fn inner(&self) -> &PromptPrototypeModel {
        &self.inner
    }

    pub fn keys(&self) -> &KeyPool {
        &self.keys
    }

    pub fn learn_task(&mut self, task: &Task) -> Result<TaskOutcome> {
        let outcome = self.inner.learn_task(task)?;
        let key = train_keys(task.id, &task.train, self.inner.params(), self.inner.config()).map_err(|e| e.in_task(task.id))?;
        self.keys.insert(task.id, key)?;
        Ok(outcome)
    }

    pub fn predict(&self, x: &[f64]) -> Result<KvPrediction> {
        kv_predict(&self.inner, &self.keys, x)
    }
}

impl ContinualLearner for KvModel {
    fn learn(&mut self, task: &Task) -> Result<()> {
        self.learn_task(task).map(|_| ())
    }

    fn predict_class(&self, x: &[f64]) -> Result<ClassId> {
        self.predict(x).map(|p| p.class)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cos(a: &Tensor, b: &Tensor) -> f64 {
        a.dot(b).unwrap() / (a.norm() * b.norm())
    }

    #[test]
    fn one_key_selects_its_task() {
        let pool = KeyPool::from_keys(BTreeMap::from([(4, Tensor::vector(vec![1.0, -2.0]).unwrap())])).unwrap();
        assert_eq!(select_prompt_by_key(&Tensor::vector(vec![-3.0, 0.5]).unwrap(), &pool).unwrap(), 4);
    }

    #[test]
    fn exact_match_with_orthogonal_keys() {
        let keys: BTreeMap<usize, Tensor> = (0..4)
            .map(|i| {
                let mut k = Tensor::zeros(&[4]);
                k.data_mut()[i] = 1.0 + i as f64;
                (i, k)
            })
            .collect();
        let pool = KeyPool::from_keys(keys.clone()).unwrap();
        for (j, k) in keys {
            assert_eq!(select_prompt_by_key(&k, &pool).unwrap(), j);
        }
    }

    #[test]
    fn ties_go_to_lowest_task() {
        let k = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let pool = KeyPool::from_keys(BTreeMap::from([(7, k.scale(2.0)), (3, k.clone())])).unwrap();
        assert_eq!(select_prompt_by_key(&k, &pool).unwrap(), 3);
    }

    #[test]
    fn random_queries_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let keys: BTreeMap<usize, Tensor> = (0..5).map(|t| (t, Tensor::randn(&[8], 1.0, &mut rng))).collect();
            let q = Tensor::randn(&[8], 1.0, &mut rng);
            let oracle = keys
                .iter()
                .map(|(&t, k)| (t, cos(&q, k)))
                .fold((usize::MAX, f64::NEG_INFINITY), |b, (t, c)| if c > b.1 { (t, c) } else { b })
                .0;
            let pool = KeyPool::from_keys(keys).unwrap();
            assert_eq!(select_prompt_by_key(&q, &pool).unwrap(), oracle);
        }
    }

    #[test]
    fn zero_query_and_empty_pool_rejected() {
        let pool = KeyPool::from_keys(BTreeMap::from([(0, Tensor::vector(vec![1.0, 0.0]).unwrap())])).unwrap();
        assert!(matches!(select_prompt_by_key(&Tensor::zeros(&[2]), &pool), Err(Error::ZeroNorm(_))));
        assert!(select_prompt_by_key(&Tensor::vector(vec![1.0, 0.0]).unwrap(), &KeyPool::new()).is_err());
    }

    #[test]
    fn duplicate_key_rejected() {
        let mut pool = KeyPool::new();
        pool.insert(0, Tensor::vector(vec![1.0]).unwrap()).unwrap();
        assert!(matches!(pool.insert(0, Tensor::vector(vec![2.0]).unwrap()), Err(Error::Protocol(_))));
    }

    #[test]
    fn identical_queries_give_parallel_key() {
        let v = Tensor::vector(vec![0.3, -1.2, 0.8, 2.0]).unwrap();
        // One task of the default stream: 200 training queries.
        let queries = vec![v.clone(); 200];
        let key = fit_key(0, &queries, &TrainConfig::default()).unwrap();
        assert!(1.0 - cos(&key, &v) < 1e-3, "{} {}", cos(&key, &v), key.norm());
    }

    #[test]
    fn opposite_queries_plateau_at_one() {
        let v = Tensor::vector(vec![1.0, 2.0, -1.0]).unwrap();
        let queries = vec![v.clone(), v.scale(-1.0)];
        let key = fit_key(0, &queries, &TrainConfig::default()).unwrap();
        let mean_cos = (cos(&key, &queries[0]) + cos(&key, &queries[1])) / 2.0;
        assert!(mean_cos.abs() < 1e-12);
    }

    #[test]
    fn clustered_queries_follow_mean_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..5 {
            let centre = Tensor::randn(&[16], 1.0, &mut rng).scale(4.0);
            let queries: Vec<Tensor> = (0..40)
                .map(|_| centre.add(&Tensor::randn(&[16], 1.0, &mut rng)).unwrap())
                .collect();
            // Stationary point of the mean cosine: the sum of unit queries.
            let mut oracle = Tensor::zeros(&[16]);
            for q in &queries {
                oracle = oracle.add(&q.scale(1.0 / q.norm())).unwrap();
            }
            let config = TrainConfig { seed: rng.random(), ..TrainConfig::default() };
            let key = fit_key(trial, &queries, &config).unwrap();
            assert!(cos(&key, &oracle) > 0.99, "trial {trial}: {}", cos(&key, &oracle));
        }
    }

    #[test]
    fn empty_task_rejected() {
        let params = EncoderParams::init(crate::encoder::EncoderConfig::desk(4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(train_keys(0, &[], &params, &TrainConfig::default()).is_err());
    }
}

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::encoder::Encoder;
use crate::error::{invalid, Error, Result};
use crate::masking::patchify;
use crate::nn::{Binder, Linear, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::pretrain::lr_schedule;
use crate::scalar::Scalar;
use crate::volume::VolumeSample;

use super::features::{prepare_input, FeatureMatrix};
use super::metrics::{auc, precision_recall, MetricMode};

/// Fold index of every sample: classes are shuffled separately and dealt
/// round-robin, so each fold gets a near-equal share of every class.
pub fn stratified_folds(labels: &[u32], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(invalid("fold count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for c in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            fold[i] = next % k;
            next += 1;
        }
    }
    Ok(fold)
}

/// Exactly `⌈fraction·n⌉` indices, split across classes by largest
/// remainder and drawn at random within each class. Returned ascending.
pub fn stratified_subset(labels: &[u32], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("data fraction {fraction} outside (0, 1]")));
    }
    let n = labels.len();
    let want = crate::masking::ceil_count(fraction, n);
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let members: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| (0..n).filter(|&i| labels[i] == c).collect())
        .collect();
    let exact: Vec<f64> = members.iter().map(|m| m.len() as f64 * want as f64 / n as f64).collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = want - take.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if take[c] < members[c].len() {
            take[c] += 1;
            left -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(want);
    for (m, t) in members.iter().zip(take) {
        let mut m = m.clone();
        m.shuffle(&mut rng);
        out.extend_from_slice(&m[..t]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub folds: usize,
    pub seed: u64,
    /// L2 penalty on the weights.
    pub l2: f64,
    pub lr: f64,
    pub iterations: usize,
    pub mode: MetricMode,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            folds: 5,
            seed: 0,
            l2: 1e-3,
            lr: 0.5,
            iterations: 300,
            mode: MetricMode::Threshold,
        }
    }
}

/// Multinomial logistic regression on standardized features, fit by
/// full-batch gradient descent from zero (deterministic).
#[derive(Debug, Clone, PartialEq)]
pub struct Logistic {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[classes][dim + 1]`, bias last.
    w: Vec<Vec<f64>>,
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

impl Logistic {
    pub fn fit(rows: &[Vec<f64>], labels: &[u32], classes: usize, cfg: &ProbeConfig) -> Logistic {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n);
        }
        let mut scale = vec![0.0; d];
        for r in rows {
            scale.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (x, m))| *s += (x - m).powi(2) / n);
        }
        scale.iter_mut().for_each(|s| *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 1.0 });
        let mut model = Logistic {
            mean,
            scale,
            w: vec![vec![0.0; d + 1]; classes],
        };
        let xs: Vec<Vec<f64>> = rows.iter().map(|r| model.standardize(r)).collect();
        for _ in 0..cfg.iterations {
            let mut grad = vec![vec![0.0; d + 1]; classes];
            for (x, &y) in xs.iter().zip(labels) {
                let mut p = model.logits_std(x);
                softmax_in_place(&mut p);
                for (c, g) in grad.iter_mut().enumerate() {
                    let e = p[c] - if c == y as usize { 1.0 } else { 0.0 };
                    g.iter_mut().zip(x.iter().chain(std::iter::once(&1.0))).for_each(|(g, xi)| *g += e * xi / n);
                }
            }
            for (w, g) in model.w.iter_mut().zip(&grad) {
                for j in 0..=d {
                    let reg = if j < d { cfg.l2 * w[j] } else { 0.0 };
                    w[j] -= cfg.lr * (g[j] + reg);
                }
            }
        }
        model
    }

    fn standardize(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) * s).collect()
    }

    fn logits_std(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .map(|w| w[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[x.len()])
            .collect()
    }

    pub fn predict_proba(&self, row: &[f64]) -> Vec<f64> {
        let mut p = self.logits_std(&self.standardize(row));
        softmax_in_place(&mut p);
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub auc: f64,
    pub ap50: f64,
    pub ar50: f64,
    pub no_positive_predictions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFold {
    pub fold: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub definition: String,
    pub mode: MetricMode,
    pub auc: f64,
    pub ap50: f64,
    pub ar50: f64,
    pub folds: Vec<FoldMetrics>,
    pub skipped: Vec<SkippedFold>,
}

impl ClassificationReport {
    fn from_folds(folds: Vec<FoldMetrics>, skipped: Vec<SkippedFold>, mode: MetricMode) -> Result<Self> {
        if folds.is_empty() {
            return Err(invalid("every fold was degenerate; no metrics"));
        }
        let n = folds.len() as f64;
        Ok(ClassificationReport {
            definition: format!(
                "auc = Mann-Whitney statistic with ties counted 1/2 (macro one-vs-rest for more than 2 classes); {}; \
                 summary values are means over evaluated folds",
                mode.definition()
            ),
            mode,
            auc: folds.iter().map(|f| f.auc).sum::<f64>() / n,
            ap50: folds.iter().map(|f| f.ap50).sum::<f64>() / n,
            ar50: folds.iter().map(|f| f.ar50).sum::<f64>() / n,
            folds,
            skipped,
        })
    }
}

/// Metrics from class probabilities. Two classes score class 1; more
/// classes are macro-averaged one-vs-rest.
pub fn score_predictions(probs: &[Vec<f64>], labels: &[u32], classes: usize, mode: MetricMode) -> Result<(f64, f64, f64, bool)> {
    let positives: Vec<usize> = if classes == 2 { vec![1] } else { (0..classes).collect() };
    let (mut a, mut p, mut r, mut flag) = (0.0, 0.0, 0.0, false);
    for &c in &positives {
        let s: Vec<f64> = probs.iter().map(|q| q[c]).collect();
        let l: Vec<bool> = labels.iter().map(|&y| y as usize == c).collect();
        a += auc(&s, &l)?;
        let pr = precision_recall(&s, &l, mode)?;
        p += pr.ap50;
        r += pr.ar50;
        flag |= pr.no_positive_predictions;
    }
    let k = positives.len() as f64;
    Ok((a / k, p / k, r / k, flag))
}

fn degenerate(labels: &[u32], classes: usize) -> Option<String> {
    let mut seen = vec![false; classes];
    labels.iter().for_each(|&l| seen[l as usize] = true);
    let n = seen.iter().filter(|&&s| s).count();
    (n < classes).then(|| format!("{n} of {classes} classes present"))
}

/// Logistic regression on frozen features, one model per stratified fold.
pub fn linear_probe(fm: &FeatureMatrix, cfg: &ProbeConfig) -> Result<ClassificationReport> {
    fm.validate()?;
    let classes = fm.n_classes();
    if classes < 2 {
        return Err(invalid("probing needs at least 2 classes"));
    }
    let fold = stratified_folds(&fm.labels, cfg.folds, cfg.seed)?;
    let mut folds = Vec::new();
    let mut skipped = Vec::new();
    for f in 0..cfg.folds {
        let train: Vec<usize> = (0..fm.len()).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..fm.len()).filter(|&i| fold[i] == f).collect();
        let tr = fm.subset(&train);
        let te = fm.subset(&test);
        if let Some(why) = degenerate(&tr.labels, classes).or_else(|| degenerate(&te.labels, classes)) {
            log::warn!("fold {f} skipped: {why}");
            skipped.push(SkippedFold { fold: f, reason: why });
            continue;
        }
        let model = Logistic::fit(&tr.rows, &tr.labels, classes, cfg);
        let probs: Vec<Vec<f64>> = te.rows.iter().map(|r| model.predict_proba(r)).collect();
        let (auc, ap50, ar50, flag) = score_predictions(&probs, &te.labels, classes, cfg.mode)?;
        folds.push(FoldMetrics {
            fold: f,
            n_train: tr.len(),
            n_test: te.len(),
            auc,
            ap50,
            ar50,
            no_positive_predictions: flag,
        });
    }
    ClassificationReport::from_folds(folds, skipped, cfg.mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Share of the training split used (0.25 and 0.5 mirror the
    /// data-limited runs).
    pub data_fraction: f64,
    /// The held-out split is fold 0 of this many.
    pub folds: usize,
    pub seed: u64,
    pub normalize: bool,
    pub mode: MetricMode,
    pub optim: AdamWConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 40,
            batch_size: 4,
            lr: 2e-4,
            data_fraction: 1.0,
            folds: 3,
            seed: 0,
            normalize: true,
            mode: MetricMode::Threshold,
            optim: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub n_train: usize,
    pub n_test: usize,
    pub losses: Vec<f64>,
    /// Dataset indices of the held-out samples.
    pub held_out: Vec<usize>,
    /// Class probabilities per held-out sample.
    pub probabilities: Vec<Vec<f64>>,
    pub metrics: ClassificationReport,
}

/// Class logits for one volume through the [CLS] embedding and `head`.
fn class_logits<T: Scalar>(
    g: &mut Graph<T>,
    enc: &Encoder,
    pb: &mut Binder<T>,
    hb: &mut Binder<T>,
    head: &Linear,
    vol: &VolumeSample<T>,
    normalize_crop: bool,
) -> Result<crate::autograd::Var> {
    let x = prepare_input(enc, vol, normalize_crop)?;
    let tg = patchify(&x, enc.cfg.patch)?;
    let t = enc.trunk(g, pb, &tg, None, None)?;
    Ok(head.forward(g, hb, t.sa.cls))
}

/// Supervised training of the whole encoder plus a linear head on [CLS],
/// scored on a held-out stratified split.
pub fn finetune<T: Scalar>(
    enc: &Encoder,
    params: &ParamStore<T>,
    data: &[VolumeSample<T>],
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    let labels: Vec<u32> = data
        .iter()
        .enumerate()
        .map(|(i, v)| v.label.ok_or_else(|| invalid(format!("sample {i} has no label"))))
        .collect::<Result<_>>()?;
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    if classes < 2 || cfg.folds < 2 || cfg.batch_size == 0 {
        return Err(invalid("finetuning needs 2+ classes, 2+ folds and a positive batch size"));
    }
    let fold = stratified_folds(&labels, cfg.folds, cfg.seed)?;
    let pool: Vec<usize> = (0..data.len()).filter(|&i| fold[i] != 0).collect();
    let test: Vec<usize> = (0..data.len()).filter(|&i| fold[i] == 0).collect();
    let pool_labels: Vec<u32> = pool.iter().map(|&i| labels[i]).collect();
    let train: Vec<usize> = stratified_subset(&pool_labels, cfg.data_fraction, cfg.seed ^ 0x5eed)?
        .into_iter()
        .map(|j| pool[j])
        .collect();
    let test_labels: Vec<u32> = test.iter().map(|&i| labels[i]).collect();
    if let Some(why) = degenerate(&test_labels, classes) {
        return Err(invalid(format!("held-out split is degenerate: {why}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut body = params.clone();
    let mut head_store = ParamStore::new();
    let w = enc.cfg.width(enc.cfg.sa_stage);
    let head = Linear::with_std(&mut head_store, &mut rng, "finetune.head", w, classes, true, 1.0 / (w as f64).sqrt());
    let mut opt_body = AdamW::new(cfg.optim.clone(), &body);
    let mut opt_head = AdamW::new(cfg.optim.clone(), &head_store);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut gb = crate::nn::ParamGrads::empty(body.len());
        let mut gh = crate::nn::ParamGrads::empty(head_store.len());
        let mut total = 0.0;
        let inv = T::one() / T::from_usize_lossy(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let i = train[rng.gen_range(0..train.len())];
            let mut g = Graph::new();
            let mut pb = Binder::new(&body, true);
            let mut hb = Binder::new(&head_store, true);
            let logits = class_logits(&mut g, enc, &mut pb, &mut hb, &head, &data[i], cfg.normalize)?;
            let mut onehot = vec![T::zero(); classes];
            onehot[labels[i] as usize] = T::one();
            let loss = g.soft_cross_entropy(logits, onehot, T::one(), None);
            let lv = g.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    step,
                    diagnostics: format!("finetune loss {lv} on sample {i} (label {})", labels[i]),
                });
            }
            total += lv;
            let mut grads = g.backward(loss);
            gb.accumulate(pb.collect(&mut grads), inv);
            gh.accumulate(hb.collect(&mut grads), inv);
        }
        let lr = lr_schedule(step, cfg.steps, 0, cfg.lr);
        opt_body.step(&mut body, &gb, lr)?;
        opt_head.step(&mut head_store, &gh, lr)?;
        losses.push(total / cfg.batch_size as f64);
    }

    let mut probs = Vec::with_capacity(test.len());
    for &i in &test {
        let mut g = Graph::new();
        let mut pb = Binder::new(&body, false);
        let mut hb = Binder::new(&head_store, false);
        let logits = class_logits(&mut g, enc, &mut pb, &mut hb, &head, &data[i], cfg.normalize)?;
        let mut p: Vec<f64> = g.value(logits).data().iter().map(|x| x.as_f64()).collect();
        softmax_in_place(&mut p);
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                step: cfg.steps,
                diagnostics: format!("non-finite class probabilities on sample {i}"),
            });
        }
        probs.push(p);
    }
    let (auc, ap50, ar50, flag) = score_predictions(&probs, &test_labels, classes, cfg.mode)?;
    let fm = FoldMetrics {
        fold: 0,
        n_train: train.len(),
        n_test: test.len(),
        auc,
        ap50,
        ar50,
        no_positive_predictions: flag,
    };
    Ok(FinetuneReport {
        n_train: train.len(),
        n_test: test.len(),
        losses,
        metrics: ClassificationReport::from_folds(vec![fm], Vec::new(), cfg.mode)?,
        held_out: test,
        probabilities: probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::super::features::FeatureSource;
    use crate::encoder::ModelConfig;
    use rand_distr::{Distribution, Normal};

    fn gaussians(n: usize, sep: f64, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let l = (i % 2) as u32;
            let off = if l == 1 { sep } else { 0.0 };
            rows.push((0..3).map(|_| nd.sample(&mut rng) + off).collect());
            labels.push(l);
        }
        FeatureMatrix::new(rows, labels, FeatureSource::Cls).unwrap()
    }

    #[test]
    fn separable_gives_perfect_auc() {
        let fm = gaussians(40, 20.0, 0);
        let r = linear_probe(&fm, &ProbeConfig::default()).unwrap();
        assert_eq!(r.folds.len(), 5);
        assert!(r.folds.iter().all(|f| f.auc == 1.0));
    }

    #[test]
    fn shuffled_labels_are_near_chance() {
        let base = gaussians(40, 0.0, 1);
        let mut total = 0.0;
        for s in 0..20 {
            let mut fm = base.clone();
            fm.labels.shuffle(&mut ChaCha8Rng::seed_from_u64(100 + s));
            let cfg = ProbeConfig {
                seed: s,
                ..Default::default()
            };
            total += linear_probe(&fm, &cfg).unwrap().auc;
        }
        let mean = total / 20.0;
        assert!((mean - 0.5).abs() <= 0.1, "mean auc {mean}");
    }

    #[test]
    fn folds_reproducible_and_stratified() {
        let labels: Vec<u32> = (0..23).map(|i| (i % 3) as u32).collect();
        let a = stratified_folds(&labels, 4, 9).unwrap();
        assert_eq!(a, stratified_folds(&labels, 4, 9).unwrap());
        for c in 0..3 {
            let mut per = [0; 4];
            (0..23).filter(|&i| labels[i] == c).for_each(|i| per[a[i]] += 1);
            assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn degenerate_fold_skipped() {
        // class 1 has two samples, so one of three folds never tests it
        let mut fm = gaussians(12, 5.0, 2);
        fm.labels = (0..12).map(|i| u32::from(i < 2)).collect();
        let r = linear_probe(&fm, &ProbeConfig { folds: 3, ..Default::default() }).unwrap();
        assert_eq!(r.folds.len(), 2);
        assert_eq!(r.skipped.len(), 1);
    }

    #[test]
    fn subset_sizes() {
        let labels: Vec<u32> = (0..30).map(|i| u32::from(i % 3 == 0)).collect();
        for (f, want) in [(0.25, 8), (0.5, 15), (1.0, 30)] {
            let s = stratified_subset(&labels, f, 1).unwrap();
            assert_eq!(s.len(), want);
            let pos = s.iter().filter(|&&i| labels[i] == 1).count();
            assert!((pos as f64 - want as f64 / 3.0).abs() <= 1.0);
        }
        assert!(stratified_subset(&labels, 0.0, 1).is_err());
    }

    #[test]
    fn finetune_smoke() {
        use super::super::features::PhantomSet;
        use crate::phantom::ShapeKind;
        let (enc, p) = Encoder::new::<f64, _>(ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let data = PhantomSet {
            count: 8,
            classes: vec![ShapeKind::Sphere, ShapeKind::Box],
            grid_size: 16,
            radius_min: 2.0,
            radius_max: 3.0,
            ..Default::default()
        }
        .generate()
        .unwrap();
        let cfg = FinetuneConfig {
            steps: 2,
            batch_size: 2,
            folds: 2,
            ..Default::default()
        };
        let r = finetune(&enc, &p, &data, &cfg).unwrap();
        assert_eq!(r.losses.len(), 2);
        assert_eq!(r.n_test, 4);
        assert!((0.0..=1.0).contains(&r.metrics.auc));
        let r2 = finetune(&enc, &p, &data, &cfg).unwrap();
        assert_eq!(r, r2);
    }
}

use std::collections::BTreeMap;

use ex2_core::augment::{augment, compute_targets, mix_augmented, slice_context, gold_train_members, train_slice_sizes, upsample_baseline, AugmentPlan, GenerationSettings, TargetPolicy};
use ex2_core::backend::{GenerationBackend, OracleBackend, OraclePool, StubBackend};
use ex2_core::bench::{generate_benchmark, Benchmark, BenchmarkConfig};
use ex2_core::codec::{AnonymizationMode, StudentTask};
use ex2_core::dataset::{assign_splits, slice_dataset, Dataset, SliceIndex, SlicingConfig, SplitAssignment};
use ex2_core::metrics::{evaluate, train_reference_student, EvalReport};
use ex2_core::seed::derive_seed;

pub struct Setup {
    pub bench: Benchmark,
    pub index: SliceIndex,
    pub split: SplitAssignment,
    pub plan: AugmentPlan,
    pub seed: u64,
}

pub fn setup(seed: u64) -> Setup {
    let bench = generate_benchmark(&BenchmarkConfig {
        seed,
        ..BenchmarkConfig::default()
    });
    let index = slice_dataset(&bench.dataset, &SlicingConfig::by_label("intent")).unwrap();
    let split = assign_splits(&index, &bench.few_shot)
        .unwrap()
        .with_partition(bench.partition.clone());
    let sizes = train_slice_sizes(&bench.dataset, &index, &split);
    let plan = compute_targets(&sizes, &split, TargetPolicy::MedianManyShot).unwrap();
    Setup {
        bench,
        index,
        split,
        plan,
        seed,
    }
}

impl Setup {
    pub fn score(&self, train: &Dataset) -> EvalReport {
        let student = train_reference_student(train, &self.split, StudentTask::Classification).unwrap();
        evaluate(&student, train, &self.index, &self.split, StudentTask::Classification).unwrap()
    }

    pub fn baseline(&self) -> EvalReport {
        self.score(&self.bench.dataset)
    }

    pub fn upsampled(&self) -> EvalReport {
        let up = upsample_baseline(&self.bench.dataset, &self.index, &self.split, &self.plan, derive_seed(self.seed, &["upsample"])).unwrap();
        self.score(&up)
    }

    pub fn oracle(&self, mode: AnonymizationMode) -> OracleBackend {
        let pools: BTreeMap<String, OraclePool> = self
            .bench
            .hidden_pools
            .iter()
            .map(|(slice, hidden)| {
                let gold = gold_train_members(&self.bench.dataset, &self.index, &self.split, slice);
                let ctx = slice_context(&self.index, slice, &gold);
                (slice.clone(), OraclePool::from_examples(hidden, mode, &ctx))
            })
            .collect();
        OracleBackend::new(pools, derive_seed(self.seed, &["oracle"]))
    }

    pub fn augmented(&self, backend: &dyn GenerationBackend, k: usize) -> EvalReport {
        let settings = GenerationSettings {
            k,
            seed: derive_seed(self.seed, &["augment"]),
            ..GenerationSettings::default()
        };
        let (synthetic, _) = augment(&self.bench.dataset, &self.index, &self.split, &self.plan, backend, &settings).unwrap();
        let mixed = mix_augmented(&self.bench.dataset, &synthetic).unwrap();
        self.score(&mixed)
    }

    pub fn ex2_oracle(&self) -> EvalReport {
        self.augmented(&self.oracle(GenerationSettings::default().mode), 10)
    }

    pub fn ex2_stub(&self, k: usize) -> EvalReport {
        self.augmented(&StubBackend::new(derive_seed(self.seed, &["stub"])), k)
    }
}

pub fn few_f1(report: &EvalReport) -> f64 {
    report.few_shot.as_ref().map_or(0.0, |m| m.macro_f1)
}

pub fn overall_acc(report: &EvalReport) -> f64 {
    report.overall.as_ref().map_or(0.0, |m| m.accuracy)
}

//! Minibatch SGD with stratified sampling over label-pure clusters.
//!
//! The training set is partitioned into clusters that each hold a single
//! label. Every step draws a fixed number of points from each cluster and
//! reweights them so the minibatch gradient stays unbiased. Tight clusters
//! mean less gradient variance than uniform sampling with the same budget.
//!
//! ```no_run
//! use strata_sgd::data::parse_libsvm;
//! use strata_sgd::strata::{neyman_allocation, per_class_kmeans, KMeansParams};
//! use strata_sgd::sgd::{run, RunConfig, SamplerKind};
//!
//! let train = parse_libsvm(std::io::BufReader::new(std::fs::File::open("train.svm")?))?;
//! let strat = per_class_kmeans(&train, 2 * train.num_classes(), &KMeansParams::default())?;
//! let alloc = neyman_allocation(&strat, 32)?;
//! let config = RunConfig::new(SamplerKind::Stratified, 32, 1e-3);
//! let outcome = run(&config, &train, &train, Some((&strat, &alloc)))?;
//! println!("{}", outcome.metrics.to_csv());
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod analysis;
pub mod cli;
pub mod data;
pub mod objective;
pub mod sampling;
pub mod sgd;
pub mod strata;
pub mod synthetic;

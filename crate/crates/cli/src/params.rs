//! Per-subcommand parameters.
//!
//! Every subcommand has a clap struct of optional flags and a resolved
//! parameter struct with defaults. Resolution overlays, in increasing
//! precedence, the defaults, the subcommand's table in the config file and
//! the flags given on the command line.

use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::UsageError;

macro_rules! params {
    ($args:ident, $params:ident { $( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr ),* $(,)? }) => {
        #[derive(clap::Args, Debug, Default, Serialize)]
        pub struct $args {
            $(
                $(#[doc = $doc])*
                #[arg(long)]
                #[serde(skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
        }

        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $params {
            $( pub $field: $ty, )*
        }

        impl Default for $params {
            fn default() -> Self {
                $params { $( $field: $default, )* }
            }
        }
    };
}

params!(GenTasksArgs, GenTasksParams {
    /// parity, lexicon-lookup or copy-match
    kind: String = "copy-match".into(),
    n_options: usize = 2,
    n_examples: usize = 1600,
});

params!(TrainArgs, TrainParams {
    /// Task file; generated from kind/n-options/n-examples when empty
    tasks: PathBuf = PathBuf::new(),
    kind: String = "copy-match".into(),
    n_options: usize = 2,
    n_examples: usize = 1600,
    n_layers: usize = 4,
    d_model: usize = 64,
    d_ff: usize = 256,
    n_heads: usize = 4,
    vocab_size: usize = 128,
    max_seq: usize = 64,
    /// gelu or relu
    nonlinearity: String = "gelu".into(),
    steps: usize = 200,
    learning_rate: f64 = 3e-3,
    batch_size: usize = 32,
    grad_clip: f64 = 1.0,
    label_smoothing: f64 = 0.1,
    /// "all" (zero- and few-shot grid) or a comma list of context labels
    contexts: String = "all".into(),
});

params!(SweepArgs, SweepParams {
    model: PathBuf = PathBuf::new(),
    tasks: PathBuf = PathBuf::new(),
    /// Context label such as i0-z-s0 or i1-d0-s1
    context: String = "i0-z-s0".into(),
    split: String = "test".into(),
    n_prompts: usize = 10,
    /// Random neurons per prompt
    n_neurons: usize = 100,
    lo: f64 = -10.0,
    hi: f64 = 10.0,
    step: f64 = 0.2,
    fit_window: f64 = 2.0,
    /// sign-relative or absolute
    mode: String = "sign-relative".into(),
    threshold: f64 = 0.95,
});

params!(EstimateArgs, EstimateParams {
    model: PathBuf = PathBuf::new(),
    tasks: PathBuf = PathBuf::new(),
    context: String = "i0-z-s0".into(),
    split: String = "test".into(),
    n_prompts: usize = 10,
    /// Integrated-gradients steps; 0 skips IG
    ig_steps: usize = 0,
    /// Neurons per prompt that get IG (first in flat order); 0 means all
    ig_neurons: usize = 0,
});

params!(EvalEstimatorsArgs, EvalEstimatorsParams {
    model: PathBuf = PathBuf::new(),
    tasks: PathBuf = PathBuf::new(),
    context: String = "i0-z-s0".into(),
    split: String = "test".into(),
    n_pairs: usize = 1000,
    fit_window: f64 = 2.0,
    step: f64 = 0.2,
    /// cg, neurgrad, ig (comma list)
    methods: String = "cg,neurgrad,ig".into(),
    ig_steps: usize = 50,
    /// Timing repetitions after three warm-ups
    reps: usize = 20,
});

params!(AttributeArgs, AttributeParams {
    model: PathBuf = PathBuf::new(),
    tasks: PathBuf = PathBuf::new(),
    context: String = "i0-z-s0".into(),
    split: String = "test".into(),
    n_prompts: usize = 200,
    /// Comma list of K
    ks: String = "1,4,16".into(),
    /// neurgrad, cg, ig, random (comma list); the first is tested against random
    methods: String = "neurgrad,cg,random".into(),
    ig_steps: usize = 20,
    lo: f64 = 0.0,
    hi: f64 = 0.5,
    step: f64 = 0.1,
});

params!(MultiArgs, MultiParams {
    model: PathBuf = PathBuf::new(),
    tasks: PathBuf = PathBuf::new(),
    context: String = "i0-z-s0".into(),
    split: String = "test".into(),
    n_prompts: usize = 50,
    /// Comma list of neuron counts
    ns: String = "1,2,4,8,16,32,64,128,256".into(),
    lo: f64 = 0.0,
    hi: f64 = 0.5,
    step: f64 = 0.01,
});

params!(ProbeArgs, ProbeParams {
    model: PathBuf = PathBuf::new(),
    tasks: PathBuf = PathBuf::new(),
    context: String = "i0-z-s0".into(),
    /// Name written in the report's task column
    task: String = "task".into(),
    n_trees: usize = 100,
    /// 0 grows trees until purity
    max_depth: usize = 0,
    bootstrap: bool = true,
    /// sqrt or all
    max_features: String = "sqrt".into(),
});

params!(MetricsArgs, MetricsParams {
    model: PathBuf = PathBuf::new(),
    tasks: PathBuf = PathBuf::new(),
    /// robustness, substitutability, trees (comma list) or all
    which: String = "all".into(),
    /// "grid" or a comma list of context labels
    contexts: String = "grid".into(),
    /// polar, magn, act or tree
    family: String = "magn".into(),
    /// Voting neurons per robustness probe
    size: usize = 32,
    /// Context for substitutability and trees
    context: String = "i0-z-s0".into(),
    window: usize = 64,
    /// Tree grid keeps cells with N + M < cap
    cap: u32 = 10,
    bootstrap: bool = true,
    max_features: String = "sqrt".into(),
});

params!(ReportArgs, ReportParams {
    /// A run directory or a directory of runs; defaults to the output root
    from: PathBuf = PathBuf::new(),
});

/// Defaults, then the config table, then the flags.
pub fn resolve<A: Serialize, P: Serialize + DeserializeOwned + Default>(args: &A, section: Option<&toml::Value>) -> anyhow::Result<P> {
    let mut merged = match serde_json::to_value(P::default())? {
        Value::Object(m) => m,
        _ => unreachable!("parameter structs serialize to objects"),
    };
    if let Some(section) = section {
        let table: Map<String, Value> = match serde_json::to_value(section)? {
            Value::Object(m) => m,
            _ => return Err(UsageError("config section must be a table".into()).into()),
        };
        for (k, v) in table {
            merged.insert(k.replace('-', "_"), v);
        }
    }
    if let Value::Object(flags) = serde_json::to_value(args)? {
        merged.extend(flags);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| UsageError(format!("invalid parameters: {e}")).into())
}

/// Parses a comma list.
pub fn list<T: std::str::FromStr>(s: &str, what: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|e| UsageError(format!("{what}: cannot parse {x:?}: {e}")).into()))
        .collect()
}

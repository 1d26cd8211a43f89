//! Command-line interface: train, evaluate, extract embeddings, dump or
//! render signature graphs, and run the self-check suite.
//!
//! All output is machine-parseable (JSON lines unless `--human`); exit codes:
//! 0 success, 2 flag errors, 3 data errors, 4 numeric failures.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sgn_core::data::{load_idx_dataset, load_raw_tensor, Dataset};
use sgn_core::model::{
    evaluate, load_model, save_model, train_loop, MhaConfig, SgnConfig, SgnModel, TrainConfig,
};
use sgn_core::nn::gradcheck::{finite_diff_grad, max_rel_err};
use sgn_core::nn::{
    batchnorm_forward, conv2d_backward, conv2d_forward, cross_entropy, fc_backward, fc_forward,
    maxpool_forward, softmax, BnMode,
};
use sgn_core::render::{render_graph, write_atomic};
use sgn_core::sggraph::{
    aggregate_channels, build_signature_graph, ChannelAgg, EdgeMode, Extremum,
};
use sgn_core::spectral::{
    decompose_graph, degree_matrix, incidence_matrix, laplacian, LaplacianKind,
};
use sgn_core::tensor::Tensor;
use sgn_core::{Result, SgnError};

#[derive(Parser)]
#[command(
    name = "sgn",
    about = "Signature-graph network trainer and toolbox",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Horizontal,
    Vertical,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExtremumArg {
    Max,
    Min,
}

impl From<ModeArg> for EdgeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Horizontal => EdgeMode::Horizontal,
            ModeArg::Vertical => EdgeMode::Vertical,
        }
    }
}

impl From<ExtremumArg> for Extremum {
    fn from(e: ExtremumArg) -> Self {
        match e {
            ExtremumArg::Max => Extremum::Maxima,
            ExtremumArg::Min => Extremum::Minima,
        }
    }
}

/// Flags shared by the model-building commands.
#[derive(Args)]
struct ModelOpts {
    /// Master seed; every random choice funnels through it
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Patch size on block-1 maps (deeper taps shrink with pooling)
    #[arg(long, default_value_t = 6)]
    patch: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Horizontal)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = ExtremumArg::Max)]
    extremum: ExtremumArg,
    /// Comma-separated block indices tapped by signature layers, or "none"
    #[arg(long, default_value = "1")]
    sg_layers: String,
    /// Feed raw signature features to the classifier as well (skip connection)
    #[arg(long)]
    skip: bool,
    /// Attach the attention head keyed by signature embeddings
    #[arg(long)]
    mha: bool,
    #[arg(long, default_value_t = 2)]
    mha_heads: usize,
    #[arg(long, default_value_t = 16)]
    mha_key_dim: usize,
    #[arg(long, default_value_t = 16)]
    mha_value_dim: usize,
    /// Join chain ends into one boustrophedon path
    #[arg(long)]
    link_chains: bool,
    /// Added to all eigenvalues before scaling (0 keeps lowest nodes zeroed)
    #[arg(long, default_value_t = 0.0)]
    eig_offset: f64,
}

impl ModelOpts {
    fn parse_sg_layers(&self) -> Result<Vec<usize>> {
        let s = self.sg_layers.trim();
        if s.is_empty() || s == "none" {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| SgnError::Argument(format!("bad --sg-layers entry '{p}'")))
            })
            .collect()
    }

    fn build_config(&self, h: usize, w: usize, c: usize, classes: usize) -> Result<SgnConfig> {
        let mut cfg = SgnConfig::desk_default(h, w, c, classes);
        cfg.seed = self.seed;
        cfg.patch_size = self.patch;
        cfg.mode = self.mode.into();
        cfg.extremum = self.extremum.into();
        cfg.sg_layers = self.parse_sg_layers()?;
        cfg.skip_connection = self.skip;
        cfg.link_chains = self.link_chains;
        cfg.eig_offset = self.eig_offset;
        cfg.mha = self.mha.then_some(MhaConfig {
            head_count: self.mha_heads,
            key_dim: self.mha_key_dim,
            value_dim: self.mha_value_dim,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on an IDX dataset directory
    Train {
        /// Directory with train-/t10k- IDX files (gz accepted)
        #[arg(long, env = "SGN_DATA_DIR")]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 0.0)]
        weight_decay: f64,
        #[arg(long, default_value_t = 0.5)]
        lr_decay: f64,
        #[arg(long, default_value_t = 3)]
        lr_decay_every: usize,
        /// Use only the first N training rows
        #[arg(long)]
        limit_train: Option<usize>,
        /// Use only the first M test rows
        #[arg(long)]
        limit_test: Option<usize>,
        /// Standardize channels with training-set statistics
        #[arg(long)]
        standardize: bool,
        /// Override the inferred class count
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Where to write the trained model
        #[arg(long, default_value = "sgn-model.bin")]
        model_out: PathBuf,
        /// Write metrics lines here instead of stdout
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Report seconds as 0.0 so metrics streams are byte-reproducible
        #[arg(long)]
        no_timing: bool,
        /// Pretty-print metrics instead of JSON lines
        #[arg(long)]
        human: bool,
        #[command(flatten)]
        model: ModelOpts,
    },
    /// Evaluate a saved model on the test split
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, env = "SGN_DATA_DIR")]
        data: PathBuf,
        #[arg(long)]
        limit_test: Option<usize>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Print the augmented feature vector (classifier input) for one image
    Embed {
        #[arg(long)]
        model: PathBuf,
        /// Raw-tensor file (magic SGT1), h x w or h x w x c
        #[arg(long)]
        image: PathBuf,
    },
    /// Dump (and optionally render) the signature graph of an image or of a
    /// model's feature map
    Graph {
        /// Raw-tensor file (magic SGT1), h x w or h x w x c
        #[arg(long)]
        image: PathBuf,
        /// Build the graph from this model's block-N map instead of the image
        #[arg(long)]
        model: Option<PathBuf>,
        /// 1-based block index; 0 means the raw image
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 6)]
        patch: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Horizontal)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value_t = ExtremumArg::Max)]
        extremum: ExtremumArg,
        #[arg(long)]
        link_chains: bool,
        /// Also render a binary PPM visualization here
        #[arg(long)]
        ppm: Option<PathBuf>,
    },
    /// Run the invariant/oracle suite and print one JSON line per property
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random cases per property
        #[arg(long, default_value_t = 200)]
        cases: usize,
        /// Test hook: inject one failing property
        #[arg(long, hide = true)]
        force_fail: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train {
            data,
            epochs,
            batch_size,
            lr,
            momentum,
            weight_decay,
            lr_decay,
            lr_decay_every,
            limit_train,
            limit_test,
            standardize,
            classes,
            threads,
            model_out,
            metrics,
            no_timing,
            human,
            model,
        } => cmd_train(CmdTrain {
            data,
            epochs,
            batch_size,
            lr,
            momentum,
            weight_decay,
            lr_decay,
            lr_decay_every,
            limit_train,
            limit_test,
            standardize,
            classes,
            threads,
            model_out,
            metrics,
            no_timing,
            human,
            model,
        }),
        Command::Eval { model, data, limit_test, threads } => {
            cmd_eval(&model, &data, limit_test, threads)
        }
        Command::Embed { model, image } => cmd_embed(&model, &image),
        Command::Graph {
            image,
            model,
            layer,
            patch,
            mode,
            extremum,
            link_chains,
            ppm,
        } => cmd_graph(&image, model.as_deref(), layer, patch, mode, extremum, link_chains, ppm),
        Command::Verify { seed, cases, force_fail } => cmd_verify(seed, cases, force_fail),
    }
}

struct CmdTrain {
    data: PathBuf,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    lr_decay: f64,
    lr_decay_every: usize,
    limit_train: Option<usize>,
    limit_test: Option<usize>,
    standardize: bool,
    classes: Option<usize>,
    threads: usize,
    model_out: PathBuf,
    metrics: Option<PathBuf>,
    no_timing: bool,
    human: bool,
    model: ModelOpts,
}

fn load_splits(
    dir: &Path,
    limit_train: Option<usize>,
    limit_test: Option<usize>,
) -> Result<(Dataset<f32>, Dataset<f32>)> {
    let mut train: Dataset<f32> = load_idx_dataset(dir, "train")?;
    let mut test: Dataset<f32> = load_idx_dataset(dir, "t10k")?;
    if let Some(n) = limit_train {
        train = train.limit(n)?;
    }
    if let Some(m) = limit_test {
        test = test.limit(m)?;
    }
    // splits must agree on the label space
    let classes = train.class_count.max(test.class_count);
    train.class_count = classes;
    test.class_count = classes;
    Ok((train, test))
}

fn cmd_train(args: CmdTrain) -> Result<i32> {
    let (mut train, mut test) = load_splits(&args.data, args.limit_train, args.limit_test)?;
    if args.standardize {
        let (mean, std) = train.standardize();
        test.apply_standardization(&mean, &std);
    }
    let classes = args.classes.unwrap_or(train.class_count);
    let (h, w, c) = train.image_dims();
    let config = args.model.build_config(h, w, c, classes)?;
    let mut model = SgnModel::<f32>::new(config)?;

    let tcfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        lr_decay: args.lr_decay,
        lr_decay_every: args.lr_decay_every,
        seed: args.model.seed,
        shuffle: true,
        threads: args.threads,
    };

    let mut lines: Vec<String> = Vec::new();
    let stdout_stream = args.metrics.is_none();
    let no_timing = args.no_timing;
    let human = args.human;
    train_loop(&mut model, &train, &test, &tcfg, |m| {
        let mut m = m.clone();
        if no_timing {
            m.seconds = 0.0;
        }
        let line = if human {
            format!(
                "epoch {:>3}  train_loss {:.6}  test_acc {:.4}  seconds {:.1}",
                m.epoch, m.train_loss, m.test_acc, m.seconds
            )
        } else {
            serde_json::to_string(&m).expect("metrics serialize")
        };
        if stdout_stream {
            println!("{line}");
        }
        lines.push(line);
    })?;

    if let Some(path) = &args.metrics {
        let mut body = lines.join("\n");
        body.push('\n');
        write_atomic(path, body.as_bytes())?;
    }
    save_model(&model, &args.model_out)?;
    Ok(0)
}

fn cmd_eval(
    model_path: &Path,
    data: &Path,
    limit_test: Option<usize>,
    threads: usize,
) -> Result<i32> {
    let mut model = load_model(model_path)?;
    let mut test: Dataset<f32> = load_idx_dataset(data, "t10k")?;
    if let Some(m) = limit_test {
        test = test.limit(m)?;
    }
    if test.class_count > model.config.class_count {
        return Err(SgnError::Argument(format!(
            "dataset has {} classes but the model was trained with {}",
            test.class_count, model.config.class_count
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| SgnError::Argument(format!("thread pool: {e}")))?;
    let acc = pool.install(|| evaluate(&mut model, &test, 256))?;
    println!("{}", serde_json::json!({ "test_acc": acc, "n": test.count() }));
    Ok(0)
}

/// Read an SGT1 raw tensor as a single-image batch matching the model input.
fn load_image_batch(path: &Path, model: &SgnModel<f32>) -> Result<Tensor<f32>> {
    let raw: Tensor<f32> = load_raw_tensor(path)?;
    let cfg = &model.config;
    let want = [cfg.input_height, cfg.input_width, cfg.input_channels];
    let shaped = match raw.rank() {
        2 if cfg.input_channels == 1 => raw.reshape(&[raw.dim(0), raw.dim(1), 1])?,
        3 => raw,
        _ => {
            return Err(SgnError::Shape(format!(
                "image tensor rank {} unsupported (want h x w or h x w x c)",
                raw.rank()
            )))
        }
    };
    if shaped.shape() != want {
        return Err(SgnError::Shape(format!(
            "image shape {:?} does not match model input {:?}",
            shaped.shape(),
            want
        )));
    }
    shaped.reshape(&[1, want[0], want[1], want[2]])
}

fn cmd_embed(model_path: &Path, image: &Path) -> Result<i32> {
    let mut model = load_model(model_path)?;
    let batch = load_image_batch(image, &model)?;
    let (_, cache) = model.forward(&batch, BnMode::Eval)?;
    let row: Vec<f64> = cache.fc_input.data().iter().map(|v| *v as f64).collect();
    println!("{}", serde_json::to_string(&row).expect("vector serialize"));
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_graph(
    image: &Path,
    model: Option<&Path>,
    layer: usize,
    patch: usize,
    mode: ModeArg,
    extremum: ExtremumArg,
    link_chains: bool,
    ppm: Option<PathBuf>,
) -> Result<i32> {
    let map: Tensor<f64> = match (model, layer) {
        (None, 0) => {
            let raw: Tensor<f64> = load_raw_tensor(image)?;
            match raw.rank() {
                2 => raw,
                3 => aggregate_channels(&raw, ChannelAgg::Mean)?,
                r => {
                    return Err(SgnError::Shape(format!(
                        "image tensor rank {r} unsupported (want h x w or h x w x c)"
                    )))
                }
            }
        }
        (None, _) => {
            return Err(SgnError::Argument(
                "--layer > 0 requires --model to produce feature maps".into(),
            ))
        }
        (Some(_), 0) => {
            return Err(SgnError::Argument(
                "--layer 0 dumps the raw image; drop --model or pick a block".into(),
            ))
        }
        (Some(mp), l) => {
            let mut m = load_model(mp)?;
            let batch = load_image_batch(image, &m)?;
            let fm = m.feature_map(&batch, l)?;
            let (h, w, c) = (fm.dim(1), fm.dim(2), fm.dim(3));
            aggregate_channels(&fm.reshape(&[h, w, c])?, ChannelAgg::Mean)?
        }
    };
    let graph = build_signature_graph(&map, patch, extremum.into(), mode.into(), link_chains)?;
    print!("{}", graph.dump());
    if let Some(path) = ppm {
        let canvas = render_graph(map.data(), map.dim(0), map.dim(1), &graph);
        write_atomic(&path, &canvas.encode_ppm())?;
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// verify: invariant/oracle suite over random cases
// ---------------------------------------------------------------------------

struct PropertyOutcome {
    name: &'static str,
    cases: usize,
    pass: bool,
    detail: String,
}

fn random_grid_graph(rng: &mut ChaCha8Rng) -> sgn_core::sggraph::SignatureGraph {
    let rows = rng.random_range(1..=8usize);
    let cols = rng.random_range(1..=8usize);
    let mode = if rng.random_range(0..2) == 0 {
        EdgeMode::Horizontal
    } else {
        EdgeMode::Vertical
    };
    let ps = 2;
    let map = Tensor::<f64>::from_vec(
        &[rows * ps, cols * ps],
        (0..rows * cols * ps * ps)
            .map(|_| rng.random_range(-5.0..5.0))
            .collect(),
    )
    .expect("map shape");
    build_signature_graph(&map, ps, Extremum::Maxima, mode, false).expect("graph")
}

fn prop_mtm_identity(rng: &mut ChaCha8Rng, cases: usize) -> PropertyOutcome {
    for _ in 0..cases {
        let g = random_grid_graph(rng);
        let m = incidence_matrix(&g);
        let mtm = m.transpose().matmul(&m);
        let dma = laplacian(&g, LaplacianKind::Combinatorial);
        if mtm.data.iter().zip(&dma.data).any(|(a, b)| a != b) {
            return PropertyOutcome {
                name: "laplacian_MtM_identity",
                cases,
                pass: false,
                detail: "M^T M != D - A".into(),
            };
        }
        let d = degree_matrix(&g);
        for i in 0..d.rows {
            if d.at(i, i) != dma.at(i, i) {
                return PropertyOutcome {
                    name: "laplacian_MtM_identity",
                    cases,
                    pass: false,
                    detail: "diagonal disagrees with degrees".into(),
                };
            }
        }
    }
    PropertyOutcome {
        name: "laplacian_MtM_identity",
        cases,
        pass: true,
        detail: String::new(),
    }
}

fn prop_spectrum(rng: &mut ChaCha8Rng, cases: usize) -> Vec<PropertyOutcome> {
    let mut range_ok = true;
    let mut mult_ok = true;
    let mut rayleigh_ok = true;
    let mut recon_ok = true;
    for _ in 0..cases {
        let g = random_grid_graph(rng);
        let dec = match decompose_graph(&g) {
            Ok(d) => d,
            Err(_) => {
                range_ok = false;
                break;
            }
        };
        if dec.eigenvalues.iter().any(|&l| !(-1e-9..=2.0 + 1e-9).contains(&l)) {
            range_ok = false;
        }
        let zeros = dec.eigenvalues.iter().filter(|l| l.abs() < 1e-9).count();
        let chains = match g.mode {
            EdgeMode::Horizontal => g.grid.grid_rows,
            EdgeMode::Vertical => g.grid.grid_cols,
        };
        if zeros != chains {
            mult_ok = false;
        }
        let n = g.node_count();
        let l = &dec.laplacian;
        for (i, &lam) in dec.eigenvalues.iter().enumerate() {
            let u: Vec<f64> = (0..n).map(|k| dec.eigenvectors.at(k, i)).collect();
            let lu: Vec<f64> = (0..n)
                .map(|r| (0..n).map(|c| l.at(r, c) * u[c]).sum())
                .collect();
            let rayleigh: f64 = u.iter().zip(&lu).map(|(a, b)| a * b).sum();
            if (rayleigh - lam).abs() > 1e-9 {
                rayleigh_ok = false;
            }
        }
        let mut ulam = dec.eigenvectors.clone();
        for r in 0..n {
            for c in 0..n {
                ulam.set(r, c, dec.eigenvectors.at(r, c) * dec.eigenvalues[c]);
            }
        }
        let rec = ulam.matmul(&dec.eigenvectors.transpose());
        if rec.max_abs_diff(l) > 1e-8 {
            recon_ok = false;
        }
    }
    vec![
        PropertyOutcome {
            name: "normalized_eigenvalue_range",
            cases,
            pass: range_ok,
            detail: String::new(),
        },
        PropertyOutcome {
            name: "zero_eigenvalue_multiplicity",
            cases,
            pass: mult_ok,
            detail: String::new(),
        },
        PropertyOutcome {
            name: "rayleigh_identity",
            cases,
            pass: rayleigh_ok,
            detail: String::new(),
        },
        PropertyOutcome {
            name: "eigen_reconstruction",
            cases,
            pass: recon_ok,
            detail: String::new(),
        },
    ]
}

fn prop_node_selection(rng: &mut ChaCha8Rng, cases: usize) -> PropertyOutcome {
    for _ in 0..cases {
        let h = rng.random_range(3..20usize);
        let w = rng.random_range(3..20usize);
        let ps = rng.random_range(2..=6usize);
        let vals: Vec<f64> = (0..h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
        let map = Tensor::from_vec(&[h, w], vals.clone()).expect("map");
        for extremum in [Extremum::Maxima, Extremum::Minima] {
            let g = build_signature_graph(&map, ps, extremum, EdgeMode::Horizontal, false)
                .expect("graph");
            // independent brute-force scan
            let rows = h.div_ceil(ps);
            let cols = w.div_ceil(ps);
            for gr in 0..rows {
                for gc in 0..cols {
                    let mut best_v = None;
                    let mut best_yx = (0usize, 0usize);
                    for dy in 0..ps {
                        for dx in 0..ps {
                            let (y, x) = (gr * ps + dy, gc * ps + dx);
                            let v = if y < h && x < w {
                                vals[y * w + x]
                            } else if extremum == Extremum::Maxima {
                                0.0
                            } else {
                                continue;
                            };
                            let take = match best_v {
                                None => true,
                                Some(bv) => {
                                    if extremum == Extremum::Maxima {
                                        v > bv
                                    } else {
                                        v < bv
                                    }
                                }
                            };
                            if take {
                                best_v = Some(v);
                                best_yx = (y, x);
                            }
                        }
                    }
                    let node = &g.nodes[gr * cols + gc];
                    if (node.y, node.x) != best_yx {
                        return PropertyOutcome {
                            name: "node_selection_bruteforce",
                            cases,
                            pass: false,
                            detail: format!("patch ({gr},{gc}) selected {:?}", (node.y, node.x)),
                        };
                    }
                    for t in 0..ps {
                        let expect = if best_yx.0 < h && gc * ps + t < w {
                            vals[best_yx.0 * w + gc * ps + t]
                        } else {
                            0.0
                        };
                        if g.attributes[(gr * cols + gc) * ps + t] != expect {
                            return PropertyOutcome {
                                name: "node_selection_bruteforce",
                                cases,
                                pass: false,
                                detail: "attribute row mismatch".into(),
                            };
                        }
                    }
                }
            }
        }
    }
    PropertyOutcome {
        name: "node_selection_bruteforce",
        cases,
        pass: true,
        detail: String::new(),
    }
}

fn prop_maxpool(rng: &mut ChaCha8Rng, cases: usize) -> PropertyOutcome {
    for _ in 0..cases {
        let h = rng.random_range(2..10usize);
        let w = rng.random_range(2..10usize);
        let window = rng.random_range(1..=h.min(w));
        let stride = rng.random_range(1..=window);
        let t = Tensor::<f64>::from_vec(
            &[1, h, w, 2],
            (0..h * w * 2).map(|_| rng.random_range(-4.0..4.0)).collect(),
        )
        .expect("tensor");
        let (out, _) = maxpool_forward(&t, window, stride).expect("pool");
        for x in 0..out.dim(1) {
            for y in 0..out.dim(2) {
                for k in 0..2 {
                    let mut best = f64::NEG_INFINITY;
                    for i in 0..window {
                        for j in 0..window {
                            best = best.max(t.at(t.i4(0, x * stride + i, y * stride + j, k)));
                        }
                    }
                    if out.at(out.i4(0, x, y, k)) != best {
                        return PropertyOutcome {
                            name: "maxpool_bruteforce",
                            cases,
                            pass: false,
                            detail: "window max mismatch".into(),
                        };
                    }
                }
            }
        }
    }
    PropertyOutcome {
        name: "maxpool_bruteforce",
        cases,
        pass: true,
        detail: String::new(),
    }
}

fn prop_softmax(rng: &mut ChaCha8Rng, cases: usize) -> PropertyOutcome {
    for _ in 0..cases {
        let b = rng.random_range(1..6usize);
        let k = rng.random_range(2..12usize);
        let logits = Tensor::<f64>::from_vec(
            &[b, k],
            (0..b * k).map(|_| rng.random_range(-40.0..40.0)).collect(),
        )
        .expect("logits");
        let p = softmax(&logits);
        for bi in 0..b {
            let s: f64 = p.data()[bi * k..(bi + 1) * k].iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return PropertyOutcome {
                    name: "softmax_row_stochastic",
                    cases,
                    pass: false,
                    detail: format!("row sum {s}"),
                };
            }
        }
    }
    PropertyOutcome {
        name: "softmax_row_stochastic",
        cases,
        pass: true,
        detail: String::new(),
    }
}

fn prop_gradcheck(rng: &mut ChaCha8Rng) -> PropertyOutcome {
    let mut worst = 0.0f64;
    // conv
    {
        let input = Tensor::<f64>::from_vec(
            &[1, 4, 4, 2],
            (0..32).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .expect("input");
        let filt = Tensor::<f64>::from_vec(
            &[2, 3, 3, 2],
            (0..36).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .expect("filters");
        let bias = Tensor::<f64>::from_vec(&[2], vec![0.1, -0.1]).expect("bias");
        let out = conv2d_forward(&input, &filt, &bias, 1, 1).expect("fwd");
        let go = Tensor::<f64>::filled(out.shape(), 0.5);
        let (_, gf, _) = conv2d_backward(&go, &input, &filt, 1, 1).expect("bwd");
        let num = finite_diff_grad(
            |f| {
                conv2d_forward(&input, f, &bias, 1, 1)
                    .expect("fwd")
                    .data()
                    .iter()
                    .map(|v| 0.5 * v)
                    .sum()
            },
            &filt,
            1e-3,
        );
        worst = worst.max(max_rel_err(gf.data(), &num));
    }
    // batchnorm
    {
        let input = Tensor::<f64>::from_vec(
            &[4, 2, 2, 2],
            (0..32).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .expect("input");
        let gamma = Tensor::<f64>::from_vec(&[2], vec![1.2, 0.8]).expect("gamma");
        let beta = Tensor::<f64>::zeros(&[2]);
        let run = |x: &Tensor<f64>| -> f64 {
            let (mut rm, mut rv) = (Tensor::zeros(&[2]), Tensor::filled(&[2], 1.0));
            let (out, _) =
                batchnorm_forward(x, &gamma, &beta, &mut rm, &mut rv, BnMode::Train, 1e-5, 0.1)
                    .expect("bn");
            out.data().iter().sum()
        };
        let (mut rm, mut rv) = (Tensor::zeros(&[2]), Tensor::filled(&[2], 1.0));
        let (out, cache) = batchnorm_forward(
            &input, &gamma, &beta, &mut rm, &mut rv, BnMode::Train, 1e-5, 0.1,
        )
        .expect("bn");
        let go = Tensor::<f64>::filled(out.shape(), 1.0);
        let (gi, _, _) = sgn_core::nn::batchnorm_backward(&go, &cache, &gamma).expect("bn bwd");
        let num = finite_diff_grad(run, &input, 1e-4);
        worst = worst.max(max_rel_err(gi.data(), &num));
    }
    // fc + cross-entropy
    {
        let input = Tensor::<f64>::from_vec(
            &[2, 5],
            (0..10).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .expect("input");
        let w = Tensor::<f64>::from_vec(
            &[5, 3],
            (0..15).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .expect("w");
        let b = Tensor::<f64>::zeros(&[3]);
        let labels = vec![2usize, 0];
        let run = |x: &Tensor<f64>| -> f64 {
            let logits = fc_forward(x, &w, &b).expect("fc");
            cross_entropy(&logits, &labels).expect("ce").0
        };
        let logits = fc_forward(&input, &w, &b).expect("fc");
        let (_, grad_logits) = cross_entropy(&logits, &labels).expect("ce");
        let (gi, _, _) = fc_backward(&grad_logits, &input, &w).expect("fc bwd");
        let num = finite_diff_grad(run, &input, 1e-4);
        worst = worst.max(max_rel_err(gi.data(), &num));
    }
    PropertyOutcome {
        name: "gradcheck_small",
        cases: 3,
        pass: worst < 1e-3,
        detail: format!("max rel err {worst:.2e}"),
    }
}

fn cmd_verify(seed: u64, cases: usize, force_fail: bool) -> Result<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::new();
    outcomes.push(prop_mtm_identity(&mut rng, cases));
    outcomes.extend(prop_spectrum(&mut rng, cases.min(60)));
    outcomes.push(prop_node_selection(&mut rng, cases));
    outcomes.push(prop_maxpool(&mut rng, cases));
    outcomes.push(prop_softmax(&mut rng, cases));
    outcomes.push(prop_gradcheck(&mut rng));
    if force_fail {
        outcomes.push(PropertyOutcome {
            name: "forced_failure",
            cases: 0,
            pass: false,
            detail: "test hook".into(),
        });
    }
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    let mut all_pass = true;
    for o in &outcomes {
        all_pass &= o.pass;
        let line = if o.detail.is_empty() {
            serde_json::json!({ "property": o.name, "cases": o.cases, "pass": o.pass })
        } else {
            serde_json::json!({
                "property": o.name,
                "cases": o.cases,
                "pass": o.pass,
                "detail": o.detail,
            })
        };
        writeln!(lock, "{line}")?;
    }
    Ok(if all_pass { 0 } else { 1 })
}

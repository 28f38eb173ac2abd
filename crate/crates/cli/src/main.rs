//! `bsa`: block-sparse attention and attention-map analysis from the shell.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use bsa_core::analysis::bench::{bench_sweep, write_bench_csv, BenchConfig};
use bsa_core::analysis::correspond::{top_k_correspondences, write_correspondences_csv};
use bsa_core::analysis::fmt_sig;
use bsa_core::analysis::layerdrop::{
    drop_schedule, join_metrics, write_schedule_table, DropMode, DropPolicy,
};
use bsa_core::analysis::quadrant::quadrant_stats;
use bsa_core::analysis::synth::{synth_scene, SynthScene};
use bsa_core::format::{read_mask, read_tensor, write_mask, write_tensor};
use bsa_core::layout::{parse_grid, DEFAULT_BLOCK_K, DEFAULT_BLOCK_Q};
use bsa_core::sparse::head_flop_estimate;
use bsa_core::{
    dense_attention, dense_attention_map, predict_mask, sparse_attention, AttentionInputs,
    BlockGeometry, BlockMask, MaskPolicy, SparseAttentionJob, SpecialPlacement, TokenLayout,
};

#[derive(Parser)]
#[command(
    name = "bsa",
    version,
    about = "Training-free block-sparse global attention"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run dense or block-sparse attention, or dump the dense probability map.
    Attend(AttendArgs),
    /// Predict a block mask from Q and K.
    Mask(MaskArgs),
    /// Per-quadrant mean/max statistics of attention maps.
    Analyze(AnalyzeArgs),
    /// Strongest patch-to-patch entries of an attention map.
    Correspond(CorrespondArgs),
    /// Layer-drop schedules.
    Layerdrop(LayerdropArgs),
    /// Generate a synthetic multi-view scene.
    Synth(SynthArgs),
    /// Dense-vs-sparse timing sweep.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct LayoutArgs {
    /// Number of frames.
    #[arg(long, default_value_t = 1)]
    frames: usize,
    /// Patch tokens per frame (inferred from the token count if omitted).
    #[arg(long)]
    patches_per_frame: Option<usize>,
    /// Special (camera + register) tokens per frame.
    #[arg(long, default_value_t = 0)]
    specials_per_frame: usize,
    /// Patch grid as RxC.
    #[arg(long)]
    grid: Option<String>,
    /// Whether each frame's specials precede or follow its patches.
    #[arg(long, default_value = "leading")]
    specials_position: String,
    #[arg(long, default_value_t = DEFAULT_BLOCK_Q)]
    block_q: usize,
    #[arg(long, default_value_t = DEFAULT_BLOCK_K)]
    block_k: usize,
}

impl LayoutArgs {
    fn resolve(&self, tokens: usize) -> Result<TokenLayout> {
        if self.frames == 0 || !tokens.is_multiple_of(self.frames) {
            bail!("{tokens} tokens do not split into {} frames", self.frames);
        }
        let per_frame = tokens / self.frames;
        let Some(inferred) = per_frame.checked_sub(self.specials_per_frame) else {
            bail!(
                "frames of {per_frame} tokens cannot hold {} specials",
                self.specials_per_frame
            );
        };
        let patches = self.patches_per_frame.unwrap_or(inferred);
        if patches != inferred {
            bail!(
                "layout expects {} tokens per frame, inputs have {per_frame}",
                patches + self.specials_per_frame
            );
        }
        let grid = self.grid.as_deref().map(parse_grid).transpose()?;
        let placement: SpecialPlacement = self.specials_position.parse()?;
        Ok(
            TokenLayout::new(self.frames, patches, self.specials_per_frame, grid)?
                .with_placement(placement),
        )
    }

    fn geometry(&self, layout: &TokenLayout) -> Result<BlockGeometry> {
        Ok(BlockGeometry::for_layout(
            layout,
            self.block_q,
            self.block_k,
        )?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AttendMode {
    Dense,
    Sparse,
    Map,
}

#[derive(Args)]
struct AttendArgs {
    #[arg(long, value_enum, default_value = "sparse")]
    mode: AttendMode,
    #[arg(long)]
    q: PathBuf,
    #[arg(long)]
    k: PathBuf,
    #[arg(long)]
    v: PathBuf,
    /// Block mask; predicted from Q/K with --tau/--rho when omitted.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    tau: f64,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[command(flatten)]
    layout: LayoutArgs,
    #[arg(long)]
    out: PathBuf,
    /// Per-head CSV: head, achieved_sparsity, sparse_flops, theoretical_speedup, wall_ms.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    q: PathBuf,
    #[arg(long)]
    k: PathBuf,
    #[arg(long)]
    tau: f64,
    #[arg(long)]
    rho: f64,
    #[command(flatten)]
    layout: LayoutArgs,
    #[arg(long)]
    out: PathBuf,
    /// Print per-head achieved sparsity as CSV.
    #[arg(long)]
    stats: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    map: PathBuf,
    #[command(flatten)]
    layout: LayoutArgs,
    /// Output CSV (stdout if omitted).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CorrespondArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long, default_value_t = 32)]
    k: usize,
    #[arg(long)]
    cross_view_only: bool,
    #[command(flatten)]
    layout: LayoutArgs,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct LayerdropArgs {
    /// front, back, front-and-back or mid.
    #[arg(long, default_value = "front")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    n: usize,
    #[arg(long, default_value_t = 24)]
    layers: usize,
    /// Emit every (mode, n) schedule as CSV instead.
    #[arg(long)]
    table: bool,
    /// Append the skipped layers to a metrics CSV with mode and n_skipped columns.
    #[arg(long)]
    join: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// Patch tokens per frame.
    #[arg(long, default_value_t = 256)]
    patches: usize,
    #[arg(long, default_value_t = 64)]
    matches: usize,
    /// Signal scale of the planted matches.
    #[arg(long, default_value_t = 8.0)]
    c: f32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Side length of scene regions sharing one match direction.
    #[arg(long, default_value_t = 1)]
    region: usize,
    #[arg(long, default_value_t = 4)]
    max_shift: usize,
    /// Wrap frames around the scene so every patch has a counterpart.
    #[arg(long)]
    periodic: bool,
    #[arg(long, default_value_t = DEFAULT_BLOCK_Q)]
    block_q: usize,
    #[arg(long, default_value_t = DEFAULT_BLOCK_K)]
    block_k: usize,
    #[arg(long)]
    out_prefix: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "4096,8192,16384,32768")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 0.4)]
    tau: f64,
    #[arg(long, default_value_t = 0.8)]
    rho: f64,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    #[arg(long, default_value_t = DEFAULT_BLOCK_Q)]
    block_q: usize,
    #[arg(long, default_value_t = DEFAULT_BLOCK_K)]
    block_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn load(path: &Path) -> Result<bsa_core::Tensor> {
    read_tensor(path).with_context(|| format!("reading {}", path.display()))
}

fn load_inputs(q: &Path, k: &Path, v: &Path) -> Result<AttentionInputs> {
    Ok(AttentionInputs::new(load(q)?, load(k)?, load(v)?)?)
}

fn load_qk(q: &Path, k: &Path) -> Result<AttentionInputs> {
    let k = load(k)?;
    let v = k.clone();
    Ok(AttentionInputs::new(load(q)?, k, v)?)
}

fn attend(args: AttendArgs) -> Result<()> {
    let inputs = load_inputs(&args.q, &args.k, &args.v)?;
    match args.mode {
        AttendMode::Dense => {
            write_tensor(&args.out, &dense_attention(&inputs)?)?;
        }
        AttendMode::Map => {
            write_tensor(&args.out, &dense_attention_map(&inputs)?)?;
        }
        AttendMode::Sparse => {
            let layout = args.layout.resolve(inputs.tokens())?;
            let geom = args.layout.geometry(&layout)?;
            let (mask, policy) = match &args.mask {
                Some(p) => (
                    read_mask(p).with_context(|| format!("reading {}", p.display()))?,
                    None,
                ),
                None => {
                    let policy = MaskPolicy::new(args.tau, args.rho, geom)?;
                    (predict_mask(&inputs, &layout, &policy)?, Some(policy))
                }
            };
            let mut job = SparseAttentionJob::new(&inputs, layout, &mask)?;
            if let Some(p) = policy {
                job = job.with_policy(p);
            }
            let start = Instant::now();
            let out = sparse_attention(&job)?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            write_tensor(&args.out, &out)?;
            if let Some(path) = &args.report {
                let mut w = output(Some(path))?;
                writeln!(
                    w,
                    "head,achieved_sparsity,sparse_flops,theoretical_speedup,wall_ms"
                )?;
                for h in 0..inputs.heads() {
                    let e = head_flop_estimate(&job, h);
                    writeln!(
                        w,
                        "{h},{},{},{},{}",
                        fmt_sig(mask.head_sparsity(h)),
                        2 * e.sparse_macs,
                        fmt_sig(e.theoretical_speedup),
                        fmt_sig(wall_ms)
                    )?;
                }
                w.flush()?;
            }
        }
    }
    Ok(())
}

fn mask(args: MaskArgs) -> Result<()> {
    let inputs = load_qk(&args.q, &args.k)?;
    let layout = args.layout.resolve(inputs.tokens())?;
    let policy = MaskPolicy::new(args.tau, args.rho, args.layout.geometry(&layout)?)?;
    let mask: BlockMask = predict_mask(&inputs, &layout, &policy)?;
    write_mask(&args.out, &mask)?;
    if args.stats {
        let mut w = io::stdout().lock();
        writeln!(w, "head,achieved_sparsity")?;
        for h in 0..mask.heads() {
            writeln!(w, "{h},{}", fmt_sig(mask.head_sparsity(h)))?;
        }
    }
    Ok(())
}

fn map_tokens(map: &bsa_core::Tensor) -> Result<usize> {
    match map.shape() {
        [.., a, b] if a == b => Ok(*a),
        s => bail!("attention map must end in two equal dimensions, got {s:?}"),
    }
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let map = load(&args.map)?;
    let layout = args.layout.resolve(map_tokens(&map)?)?;
    let stats = quadrant_stats(&map, &layout)?;
    stats.write_csv(output(args.csv.as_deref())?)?;
    Ok(())
}

fn correspond(args: CorrespondArgs) -> Result<()> {
    let map = load(&args.map)?;
    let layout = args.layout.resolve(map_tokens(&map)?)?;
    let list = top_k_correspondences(&map, &layout, args.k, args.cross_view_only)?;
    write_correspondences_csv(&list, output(args.csv.as_deref())?)?;
    Ok(())
}

fn layerdrop(args: LayerdropArgs) -> Result<()> {
    let out = output(args.csv.as_deref())?;
    if let Some(path) = &args.join {
        let metrics = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        join_metrics(args.layers, metrics, out)?;
    } else if args.table {
        write_schedule_table(args.layers, out)?;
    } else {
        let mode: DropMode = args.mode.parse()?;
        let layers = drop_schedule(&DropPolicy::new(mode, args.n, args.layers)?);
        let mut out = out;
        let text: Vec<String> = layers.iter().map(usize::to_string).collect();
        writeln!(out, "{}", text.join(","))?;
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let scene = SynthScene::builder(args.frames, args.patches)
        .matches(args.matches)
        .signal(args.c)
        .head_dim(args.head_dim)
        .heads(args.heads)
        .region(args.region)
        .max_shift(args.max_shift)
        .periodic(args.periodic);
    let out = synth_scene(&scene, args.seed)?;
    let prefix = &args.out_prefix;
    write_tensor(format!("{prefix}_q.bsat"), out.inputs.q())?;
    write_tensor(format!("{prefix}_k.bsat"), out.inputs.k())?;
    write_tensor(format!("{prefix}_v.bsat"), out.inputs.v())?;

    let mut w = output(Some(Path::new(&format!("{prefix}_matches.csv"))))?;
    writeln!(w, "frame_a,token_a,frame_b,token_b,query_index,key_index")?;
    for m in &out.matches {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            m.frame_a,
            m.token_a,
            m.frame_b,
            m.token_b,
            out.token_index(m.frame_a, m.token_a),
            out.token_index(m.frame_b, m.token_b)
        )?;
    }
    w.flush()?;

    let geom = BlockGeometry::for_layout(&out.layout, args.block_q, args.block_k)?;
    let mut w = output(Some(Path::new(&format!("{prefix}_blocks.csv"))))?;
    writeln!(w, "query_block,key_block,pairs")?;
    for ((qb, kb), count) in out.block_relevance(&geom) {
        writeln!(w, "{qb},{kb},{count}")?;
    }
    w.flush()?;
    Ok(())
}

fn bench(args: BenchArgs, threads: Option<usize>) -> Result<()> {
    let cfg = BenchConfig {
        sizes: args.sizes,
        tau: args.tau,
        rho: args.rho,
        block_q: args.block_q,
        block_k: args.block_k,
        heads: args.heads,
        head_dim: args.head_dim,
        repeats: args.repeats,
        seed: args.seed,
        threads,
    };
    let rows = bench_sweep(&cfg)?;
    write_bench_csv(&rows, output(args.csv.as_deref())?)?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let (Some(t), false) = (cli.threads, matches!(cli.command, Command::Bench(_))) {
        rayon_pool(t)?;
    }
    match cli.command {
        Command::Attend(a) => attend(a),
        Command::Mask(a) => mask(a),
        Command::Analyze(a) => analyze(a),
        Command::Correspond(a) => correspond(a),
        Command::Layerdrop(a) => layerdrop(a),
        Command::Synth(a) => synth(a),
        Command::Bench(a) => bench(a, cli.threads),
    }
}

fn rayon_pool(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring worker threads")
}

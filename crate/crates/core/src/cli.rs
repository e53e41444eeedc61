//! Command-line driver.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};

use crate::error::Error;
use crate::exec::Execution;
use crate::geometry::{
    make_channel, make_packing, make_plate_channel, voxel_load, voxel_save, VoxelGrid,
};
use crate::numbering::NumberingScheme;
use crate::partition::{
    chunk_ranges, emit_histograms, histogram_paths, import_partition_map, parse_partition_map,
    partition_stats,
};
use crate::pipeline::preprocess;
use crate::solver::{run_benchmark, Simulation, TrtParams};
use crate::sparse_io::{open_sparse, read_all, write_sparse};

pub const EXIT_PIPELINE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "sparselbm",
    version,
    about = "Preprocessing and validation tools for sparse lattice Boltzmann domains"
)]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    /// Log progress to stderr (repeat for more detail).
    #[arg(long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic voxel geometry.
    Generate(GenerateArgs),
    /// Number a voxel geometry and write its sparse representation.
    Preprocess(PreprocessArgs),
    /// Score a partitioning of a sparse file and write histograms.
    Analyze(AnalyzeArgs),
    /// Run the flow solver.
    Solve(SolveArgs),
    /// Time the flow solver.
    Bench(BenchArgs),
    /// Print the header of a voxel or sparse file.
    Info(InfoArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("geometry").required(true).args(["channel", "packing", "plate"])))]
struct GenerateArgs {
    /// Square duct of d x d cross-section and length 5d.
    #[arg(long)]
    channel: bool,
    /// Random sphere packing in a cylinder of diameter d and length 5d.
    #[arg(long)]
    packing: bool,
    /// Plate channel with solid rows at y = 0 and y = Y-1.
    #[arg(long, requires = "dims")]
    plate: bool,
    #[arg(long, required_unless_present = "plate")]
    d: Option<usize>,
    /// Extents X,Y,Z of a plate channel.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// `lex:b=N` or `morton:g=1|2`.
    #[arg(long, value_parser = parse_scheme_arg)]
    scheme: NumberingScheme,
    /// Simulated ranks for the distributed numbering.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    ranks: u64,
    /// Periodic axes, e.g. `x,z`, or `none`.
    #[arg(long, default_value = "none", value_parser = parse_periodic)]
    periodic: [bool; 3],
    /// Partition start list to store in the header.
    #[arg(long)]
    partition_map: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("partitioning").required(true).args(["parts", "map"])))]
struct AnalyzeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Equal chunks.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    parts: Option<u64>,
    /// Partition start list, one index per line.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Histograms go to `<prefix>_neighbors.csv` and `<prefix>_remote_links.csv`.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Equal chunks; without it the partition table in the file is used.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    parts: Option<u64>,
    #[arg(long, default_value_t = 0.8)]
    tau: f64,
    #[arg(long, default_value_t = TrtParams::DEFAULT_LAMBDA)]
    lambda: f64,
    /// Body force gx,gy,gz per step.
    #[arg(long, default_value = "0,0,0", value_parser = parse_force)]
    force: [f64; 3],
    #[arg(long, default_value_t = 100)]
    steps: u64,
    /// Initial density.
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    /// CSV output path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    solve: SolveArgs,
    /// Untimed steps before measuring.
    #[arg(long, default_value_t = 10)]
    warmup: u64,
}

#[derive(Debug, Args)]
struct InfoArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

fn parse_scheme_arg(s: &str) -> Result<NumberingScheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_periodic(s: &str) -> Result<[bool; 3], String> {
    let mut p = [false; 3];
    if s == "none" {
        return Ok(p);
    }
    for axis in s.split(',') {
        let a = match axis.trim() {
            "x" => 0,
            "y" => 1,
            "z" => 2,
            other => return Err(format!("unknown axis `{other}`, expected x, y, z or none")),
        };
        p[a] = true;
    }
    Ok(p)
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got `{s}`"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.trim()
                .parse()
                .map_err(|_| format!("`{p}` is not a number"))?,
        );
    }
    out.try_into().map_err(|_| unreachable!())
}

fn parse_force(s: &str) -> Result<[f64; 3], String> {
    parse_triple(s)
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    parse_triple(s)
}

enum Failure {
    Usage(String),
    Pipeline(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Pipeline(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Pipeline(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn require_file(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "input file `{}` does not exist",
            path.display()
        )))
    }
}

fn require_distinct(paths: &[&Path]) -> CmdResult {
    let resolved: Vec<PathBuf> = paths
        .iter()
        .map(|p| {
            p.canonicalize()
                .or_else(|_| std::path::absolute(p))
                .unwrap_or_else(|_| p.to_path_buf())
        })
        .collect();
    for i in 0..resolved.len() {
        if resolved[i + 1..].contains(&resolved[i]) {
            return Err(Failure::Usage(format!(
                "path `{}` is used twice",
                paths[i].display()
            )));
        }
    }
    Ok(())
}

/// Parse `argv` (including the program name), run the subcommand and
/// return the process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();

    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match with_threads(cli.threads, || dispatch(cli.command, exec)) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e}");
            EXIT_PIPELINE
        }
    }
}

#[cfg(feature = "parallel")]
fn with_threads(threads: Option<usize>, f: impl FnOnce() -> CmdResult + Send) -> CmdResult {
    match threads {
        Some(0) => Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure::Usage(format!("cannot start {n} threads: {e}")))?;
            pool.install(f)
        }
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads(threads: Option<usize>, f: impl FnOnce() -> CmdResult + Send) -> CmdResult {
    if threads.is_some_and(|n| n > 1) {
        log::warn!("built without the `parallel` feature; running on one thread");
    }
    f()
}

fn dispatch(command: Command, exec: Execution) -> CmdResult {
    match command {
        Command::Generate(a) => generate(a),
        Command::Preprocess(a) => preprocess_cmd(a, exec),
        Command::Analyze(a) => analyze(a, exec),
        Command::Solve(a) => solve(a, exec),
        Command::Bench(a) => bench(a, exec),
        Command::Info(a) => info(a),
    }
}

fn generate(a: GenerateArgs) -> CmdResult {
    let grid = if a.plate {
        let [x, y, z] = a.dims.expect("clap enforces --dims");
        make_plate_channel(x, y, z)?
    } else {
        let d = a.d.expect("clap enforces --d");
        if a.channel {
            make_channel(d)?
        } else {
            make_packing(d, a.seed)?
        }
    };
    voxel_save(&a.out, &grid)?;
    println!(
        "dims {:?}, fluid cells {}, fluid fraction {:.4}",
        grid.dims(),
        grid.fluid_count(),
        grid.fluid_fraction()
    );
    Ok(())
}

fn preprocess_cmd(a: PreprocessArgs, exec: Execution) -> CmdResult {
    require_file(&a.input)?;
    if let Some(map) = &a.partition_map {
        require_file(map)?;
        require_distinct(&[&a.input, map, &a.out])?;
    } else {
        require_distinct(&[&a.input, &a.out])?;
    }
    let grid: VoxelGrid = voxel_load(&a.input)?;
    let ranks =
        usize::try_from(a.ranks).map_err(|_| Failure::Usage("rank count too large".into()))?;
    let mut out = preprocess(&grid, &a.scheme, ranks, a.periodic, exec)?;
    if let Some(map) = &a.partition_map {
        let text = std::fs::read_to_string(map)?;
        let table = parse_partition_map(&text, out.header.fluid_cells)?;
        out.header.partition_starts = Some(table.starts().to_vec());
    }
    write_sparse(&a.out, &out.header, out.records, exec)?;
    println!(
        "fluid cells {}, scheme {}, ranks {}",
        out.header.fluid_cells, a.scheme, a.ranks
    );
    Ok(())
}

fn analyze(a: AnalyzeArgs, exec: Execution) -> CmdResult {
    require_file(&a.input)?;
    let [neighbors, remote] = histogram_paths(&a.out_prefix);
    if let Some(map) = &a.map {
        require_file(map)?;
        require_distinct(&[&a.input, map, &neighbors, &remote])?;
    } else {
        require_distinct(&[&a.input, &neighbors, &remote])?;
    }
    let (header, records) = read_all(&a.input)?;
    let assignment = match (a.parts, &a.map) {
        (Some(n), _) => chunk_ranges(header.fluid_cells, n)?,
        (None, Some(map)) => import_partition_map(map, header.fluid_cells)?,
        (None, None) => unreachable!("clap requires --parts or --map"),
    };
    let stats = partition_stats(&records, &assignment, exec)?;
    let files = emit_histograms(&stats, &a.out_prefix)?;
    println!(
        "partitions {}, total remote links {}, max remote links {}, max neighbors {}",
        assignment.parts(),
        stats.total_remote_links(),
        stats.max_remote_links(),
        stats.max_neighbor_count()
    );
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn load_simulation(a: &SolveArgs, exec: Execution) -> Result<Simulation, Failure> {
    require_file(&a.input)?;
    if let Some(report) = &a.report {
        require_distinct(&[&a.input, report])?;
    }
    let params = TrtParams::new(a.tau, a.lambda, a.force)?;
    let mut sim = Simulation::load(&a.input, a.parts, params, exec)?;
    sim.init_equilibrium(a.rho, [0.0; 3])?;
    Ok(sim)
}

fn solve(a: SolveArgs, exec: Execution) -> CmdResult {
    let mut sim = load_simulation(&a, exec)?;
    let mass0 = sim.mass();
    sim.run(a.steps)?;
    let cells = sim.macroscopic();
    let n = cells.len().max(1) as f64;
    let mean_u: Vec<f64> = (0..3)
        .map(|k| cells.iter().map(|c| c.u[k]).sum::<f64>() / n)
        .collect();
    println!(
        "steps {}, fluid cells {}, partitions {}, mass {:.12e} (initial {:.12e}), mean u ({:.6e}, {:.6e}, {:.6e})",
        a.steps,
        sim.fluid_cells(),
        sim.domains().len(),
        sim.mass(),
        mass0,
        mean_u[0],
        mean_u[1],
        mean_u[2]
    );
    if let Some(path) = &a.report {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "ic,x,y,z,rho,ux,uy,uz")?;
        for c in cells {
            writeln!(
                w,
                "{},{},{},{},{:.17e},{:.17e},{:.17e},{:.17e}",
                c.ic, c.coord[0], c.coord[1], c.coord[2], c.rho, c.u[0], c.u[1], c.u[2]
            )?;
        }
        w.flush()?;
    }
    Ok(())
}

fn bench(a: BenchArgs, exec: Execution) -> CmdResult {
    let mut sim = load_simulation(&a.solve, exec)?;
    let report = run_benchmark(&mut sim, a.solve.steps, a.warmup)?;
    for (p, t) in report.per_partition.iter().enumerate() {
        log::info!(
            "partition {p}: compute {:.6} s, exchange {:.6} s",
            t.compute.as_secs_f64(),
            t.exchange.as_secs_f64()
        );
    }
    match &a.solve.report {
        Some(path) => report.write_csv(BufWriter::new(File::create(path)?))?,
        None => report.write_csv(io::stdout().lock())?,
    }
    Ok(())
}

fn info(a: InfoArgs) -> CmdResult {
    require_file(&a.input)?;
    let mut magic = [0u8; 4];
    File::open(&a.input)?.read_exact(&mut magic)?;
    if &magic == b"VOXL" {
        let grid = voxel_load(&a.input)?;
        println!("voxel grid");
        println!("dims {:?}", grid.dims());
        println!("fluid cells {}", grid.fluid_count());
        println!("fluid fraction {:.6}", grid.fluid_fraction());
        return Ok(());
    }
    let (h, _) = open_sparse(&a.input)?;
    let axes: Vec<&str> = ["x", "y", "z"]
        .iter()
        .zip(h.periodic)
        .filter_map(|(n, p)| p.then_some(*n))
        .collect();
    println!("sparse representation");
    println!("dims {:?}", h.dims);
    println!("fluid cells {}", h.fluid_cells);
    println!("scheme {}", h.scheme);
    println!(
        "periodic {}",
        if axes.is_empty() {
            "none".to_string()
        } else {
            axes.join(",")
        }
    );
    match &h.partition_starts {
        Some(s) => println!("partition table {} entries", s.len()),
        None => println!("partition table none"),
    }
    Ok(())
}

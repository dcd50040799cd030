//! Replica management from the command line: create, update, read,
//! meld, and inspect local packs, plus the multi-client convergence
//! scenario runner.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deltadoc::harness::{run_scenario, GossipSchedule, ScenarioConfig};
use deltadoc::{
    canonical_json, load_pack, parse_json, pretty_json, save_pack, unflatten, Error,
    MaterializeMode, ObjectId,
};

#[derive(Parser)]
#[command(name = "deltadoc", version, about = "Delta-state JSON document replicas")]
struct Cli {
    /// Replica directory.
    #[arg(short, long, global = true, env = "DELTADOC_REPLICA")]
    replica: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize an empty replica.
    Create,
    /// Commit a JSON document to the replica.
    Update {
        /// File holding the new state of the document.
        json_file: PathBuf,
    },
    /// Materialize the document on standard output.
    Read(ReadArgs),
    /// Exchange blocks with another replica.
    Meld {
        /// The other replica directory.
        other: PathBuf,
        /// Only pull blocks from the other replica.
        #[arg(long)]
        pull: bool,
    },
    /// Print the revision tree of one object.
    Log {
        object_id: String,
    },
    /// Run a simulated multi-client convergence scenario.
    Scenario(ScenarioArgs),
}

#[derive(Args)]
struct ReadArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Updated)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = OutputArg::Pretty)]
    output: OutputArg,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(2..))]
    clients: u32,
    #[arg(long, default_value_t = 100)]
    edits: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check reads in legacy mode instead of the updated mode.
    #[arg(long)]
    legacy: bool,
    #[arg(long, default_value_t = 1)]
    min_moves: usize,
    #[arg(long, default_value_t = 5)]
    max_moves: usize,
    /// Random replica pairs melded after each round of edits.
    #[arg(long, default_value_t = 1)]
    gossip_pairs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Updated,
    Legacy,
}

impl From<ModeArg> for MaterializeMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Updated => MaterializeMode::Updated,
            ModeArg::Legacy => MaterializeMode::Legacy,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputArg {
    Pretty,
    Canonical,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CommandError { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}

struct CommandError {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> CommandError {
    CommandError {
        code,
        message: message.into(),
    }
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        fail(1, e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), CommandError> {
    match cli.command {
        Command::Create => cmd_create(&replica_path(&cli.replica)?),
        Command::Update { json_file } => cmd_update(&replica_path(&cli.replica)?, &json_file),
        Command::Read(args) => cmd_read(&replica_path(&cli.replica)?, &args),
        Command::Meld { other, pull } => cmd_meld(&replica_path(&cli.replica)?, &other, pull),
        Command::Log { object_id } => cmd_log(&replica_path(&cli.replica)?, &object_id),
        Command::Scenario(args) => cmd_scenario(&args),
    }
}

fn replica_path(path: &Option<PathBuf>) -> Result<PathBuf, CommandError> {
    path.clone()
        .ok_or_else(|| fail(1, "no replica directory; pass --replica or set DELTADOC_REPLICA"))
}

fn cmd_create(replica: &Path) -> Result<(), CommandError> {
    if replica.exists() {
        let occupied = fs::read_dir(replica)
            .map_err(|e| fail(1, format!("{}: {e}", replica.display())))?
            .next()
            .is_some();
        if occupied {
            return Err(fail(2, format!("{} is not empty", replica.display())));
        }
    }
    fs::create_dir_all(replica).map_err(|e| fail(1, format!("{}: {e}", replica.display())))?;
    eprintln!("created replica at {}", replica.display());
    Ok(())
}

fn cmd_update(replica: &Path, json_file: &Path) -> Result<(), CommandError> {
    let _lock = ReplicaLock::acquire(replica)?;
    let mut state = load_pack(replica)?;
    let bytes =
        fs::read(json_file).map_err(|e| fail(1, format!("{}: {e}", json_file.display())))?;
    let doc = parse_json(&bytes)
        .map_err(|e| fail(3, format!("{}: {e}", json_file.display())))?;
    let block = state.commit(&doc).map_err(|e| match e {
        Error::RootNotRecord | Error::InvalidIdField => fail(3, e.to_string()),
        other => other.into(),
    })?;
    match block {
        Some(block) => {
            save_pack(&state, replica)?;
            println!("{}", block.id());
        }
        None => println!("no changes"),
    }
    Ok(())
}

fn cmd_read(replica: &Path, args: &ReadArgs) -> Result<(), CommandError> {
    let state = load_pack(replica)?;
    let doc = unflatten(&state, args.mode.into()).map_err(|e| match e {
        Error::EmptyReplica => fail(4, e.to_string()),
        other => other.into(),
    })?;
    let mut stdout = std::io::stdout().lock();
    let out = match args.output {
        OutputArg::Pretty => pretty_json(&doc).into_bytes(),
        OutputArg::Canonical => canonical_json(&doc),
    };
    stdout
        .write_all(&out)
        .and_then(|_| stdout.write_all(b"\n"))
        .map_err(|e| fail(1, e.to_string()))?;
    Ok(())
}

fn cmd_meld(replica: &Path, other: &Path, pull: bool) -> Result<(), CommandError> {
    let _lock = ReplicaLock::acquire(replica)?;
    let mut ours = load_pack(replica)?;
    let mut theirs = load_pack(other)?;
    let map_root_mismatch = |e: Error| match e {
        Error::RootMismatch(a, b) => fail(5, Error::RootMismatch(a, b).to_string()),
        other => other.into(),
    };
    let mut new_blocks = ours.meld(&theirs).map_err(map_root_mismatch)?;
    save_pack(&ours, replica)?;
    if !pull {
        new_blocks += theirs.meld(&ours).map_err(map_root_mismatch)?;
        save_pack(&theirs, other)?;
    }
    println!("{new_blocks} new blocks");
    Ok(())
}

fn cmd_log(replica: &Path, object_id: &str) -> Result<(), CommandError> {
    let state = load_pack(replica)?;
    if object_id.is_empty() {
        return Err(fail(6, "unknown object: \"\""));
    }
    let id = ObjectId::new(object_id);
    let tree = state
        .tree(&id)
        .ok_or_else(|| fail(6, format!("unknown object: {object_id:?}")))?;
    let winner = tree.winner().map_err(CommandError::from)?;
    for (parent, child) in tree.edges() {
        let mut line = match parent {
            Some(parent) => format!("{parent} \u{2192} {child}"),
            None => child.to_string(),
        };
        if tree.is_tombstone(child) {
            line.push_str(" [tombstone]");
        }
        if child == winner {
            line.push_str(" (winner)");
        }
        println!("{line}");
    }
    Ok(())
}

fn cmd_scenario(args: &ScenarioArgs) -> Result<(), CommandError> {
    if args.min_moves > args.max_moves {
        return Err(fail(1, "--min-moves must not exceed --max-moves"));
    }
    let mut cfg = ScenarioConfig::new(args.clients as usize, args.edits as usize, args.seed);
    cfg.moves_per_edit = args.min_moves..=args.max_moves;
    cfg.gossip = GossipSchedule {
        pairs_per_round: args.gossip_pairs,
    };
    cfg.mode = if args.legacy {
        MaterializeMode::Legacy
    } else {
        MaterializeMode::Updated
    };
    let report = run_scenario(&cfg)?;
    print!("{}", report.to_json_lines());
    if report.is_clean() {
        eprintln!("scenario clean: {} checks", report.steps.len());
        Ok(())
    } else {
        Err(fail(
            1,
            format!("scenario found {} violations", report.violations()),
        ))
    }
}

/// Advisory lock over a replica directory for mutating commands. The
/// lock file stays behind; the OS drops the lock when the process exits.
struct ReplicaLock {
    _file: File,
}

impl ReplicaLock {
    fn acquire(replica: &Path) -> Result<Self, CommandError> {
        if !replica.is_dir() {
            return Err(fail(1, format!("{} is not a replica", replica.display())));
        }
        let file = File::create(replica.join(".lock"))
            .map_err(|e| fail(1, format!("cannot lock replica: {e}")))?;
        file.lock()
            .map_err(|e| fail(1, format!("cannot lock replica: {e}")))?;
        Ok(ReplicaLock { _file: file })
    }
}

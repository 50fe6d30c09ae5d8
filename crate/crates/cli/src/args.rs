use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "appwatch", version, about = "Watch which domains your apps contact")]
pub struct Cli {
    /// State directory [default: $APPWATCH_HOME or ~/.appwatch]
    #[arg(long, global = true, value_name = "DIR")]
    pub home: Option<PathBuf>,

    /// Configuration file [default: <home>/config.toml]
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the DNS proxy and print queries as they happen
    Monitor(MonitorArgs),
    /// Start, stop, and inspect app recordings
    #[command(subcommand)]
    Record(RecordCmd),
    /// Remove names from a stopped recording before sharing it
    Sanitize(SanitizeArgs),
    /// Minimize a recording and send it to an aggregation server
    Upload(UploadArgs),
    /// Print the raw local log
    Export(ExportArgs),
    /// Rank names that are requested close in time to a target name
    Analyze(AnalyzeArgs),
    /// Check names against tracker lists
    Classify(ClassifyArgs),
    /// Run the aggregation server
    Serve(ServeArgs),
    /// Manage ignore and block rules
    #[command(subcommand)]
    Filters(FiltersCmd),
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    /// Address for DNS over UDP and TCP
    #[arg(long)]
    pub listen: Option<SocketAddr>,
    /// Upstream resolver
    #[arg(long)]
    pub upstream: Option<SocketAddr>,
    /// Upstream timeout in seconds
    #[arg(long, value_name = "SECS")]
    pub timeout: Option<u64>,
    /// Delete background entries older than this many seconds
    #[arg(long, value_name = "SECS")]
    pub retention: Option<u64>,
    /// Address of the local control API
    #[arg(long)]
    pub control: Option<SocketAddr>,
    /// Do not print queries
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum RecordCmd {
    /// Start recording for an app
    Start {
        /// App bundle id, e.g. com.example.app
        #[arg(long)]
        app: String,
        /// Tag attached to the recording (repeatable)
        #[arg(long = "tag", value_name = "TAG")]
        tags: Vec<String>,
    },
    /// Stop the active recording
    Stop,
    /// List recordings
    List {
        #[arg(long)]
        tsv: bool,
    },
    /// Show the names in a recording with request counts
    Show {
        /// Session id or unique prefix
        session: String,
        #[arg(long)]
        tsv: bool,
    },
    /// Delete a recording
    Delete { session: String },
}

#[derive(Debug, Args)]
pub struct SanitizeArgs {
    /// Session id or unique prefix
    pub session: String,
    /// Name to remove (repeatable); without it the names are listed and a
    /// selection is read from standard input
    #[arg(long, value_name = "FQDN")]
    pub remove: Vec<String>,
}

#[derive(Debug, Args)]
pub struct UploadArgs {
    /// Session id or unique prefix
    #[arg(long)]
    pub session: String,
    /// Base URL of the aggregation server
    #[arg(long)]
    pub server: Option<String>,
    /// Send without asking for confirmation
    #[arg(long)]
    pub yes: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Write to a file instead of standard output
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Target name
    #[arg(long)]
    pub domain: String,
    /// Window in seconds (0 to 30)
    #[arg(long, default_value_t = 5)]
    pub window: u32,
    /// Restrict to one recording
    #[arg(long)]
    pub session: Option<String>,
    /// Maximum number of rows
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub tsv: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ListArgs {
    /// Hosts-format list as NAME=PATH (repeatable)
    #[arg(long = "hosts-list", value_name = "NAME=PATH")]
    pub hosts_lists: Vec<String>,
    /// Filter-list-format list as NAME=PATH (repeatable)
    #[arg(long = "domain-list", value_name = "NAME=PATH")]
    pub domain_lists: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Names to classify
    pub names: Vec<String>,
    /// File with one name per line
    #[arg(long)]
    pub file: Option<PathBuf>,
    #[command(flatten)]
    pub lists: ListArgs,
    #[arg(long)]
    pub tsv: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// HTTP listen address
    #[arg(long)]
    pub listen: Option<SocketAddr>,
    /// Directory for stored recordings and groups
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[command(flatten)]
    pub lists: ListArgs,
}

#[derive(Debug, Subcommand)]
pub enum FiltersCmd {
    /// Add or replace a rule
    Add {
        pattern: String,
        /// Refuse resolution
        #[arg(long, conflicts_with = "ignore", required_unless_present = "ignore")]
        block: bool,
        /// Resolve but do not log
        #[arg(long)]
        ignore: bool,
        /// Also match every subdomain
        #[arg(long)]
        subdomains: bool,
    },
    /// Remove a rule
    Remove { pattern: String },
    /// List rules
    List {
        #[arg(long)]
        tsv: bool,
    },
}

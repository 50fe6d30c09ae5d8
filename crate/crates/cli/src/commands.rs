use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::pin::pin;

use anyhow::{bail, Context, Result};
use appwatch_core::aggregator::{self, Aggregator};
use appwatch_core::clock::SystemClock;
use appwatch_core::cooccurrence::{find_in_log, CoOccurrenceError, CoOccurrenceQuery};
use appwatch_core::dns::{FilterMode, FilterRule, FilterSet};
use appwatch_core::logstore::{LogStore, RecordingSession, RetentionPolicy, SessionState, StoreEvent, StoreState};
use appwatch_core::minimizer;
use appwatch_core::monitor::{self, MonitorConfig, DEFAULT_PURGE_INTERVAL};
use appwatch_core::trackerdb::{parse_domain_list, parse_hosts_list, registrable_domain, TrackerDb};
use appwatch_core::Fqdn;
use chrono::{DateTime, Local, Utc};
use serde_json::Value;
use tokio::sync::broadcast::error::RecvError;

use crate::args::*;
use crate::backend::{self, check, http_agent};
use crate::config::{Config, Home, DEFAULT_SERVE_LISTEN};
use crate::table::{percent, render};

/// Bad invocation detected after parsing; exits with the usage code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

fn parse_name(s: &str) -> Result<Fqdn> {
    match Fqdn::new(s) {
        Ok(n) => Ok(n),
        Err(e) => usage(format!("invalid domain name {s:?}: {e}")),
    }
}

pub struct Ctx {
    pub home: Home,
    pub config: Config,
}

pub fn run(cli: Cli) -> Result<()> {
    let home = Home::resolve(cli.home)?;
    let (config_path, explicit) = match cli.config {
        Some(p) => (p, true),
        None => (home.config(), false),
    };
    let ctx = Ctx { config: Config::load(&config_path, explicit)?, home };
    match cli.command {
        Command::Monitor(a) => monitor(&ctx, a),
        Command::Record(a) => record(&ctx, a),
        Command::Sanitize(a) => sanitize(&ctx, a),
        Command::Upload(a) => upload(&ctx, a),
        Command::Export(a) => export(&ctx, a),
        Command::Analyze(a) => analyze(&ctx, a),
        Command::Classify(a) => classify(a),
        Command::Serve(a) => serve(&ctx, a),
        Command::Filters(a) => filters(&ctx, a),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().context("starting runtime")
}

fn utc(ts: i64) -> String {
    DateTime::<Utc>::from_timestamp(ts, 0)
        .map(|t| t.format("%Y-%m-%d %H:%M:%S").to_string())
        .unwrap_or_else(|| ts.to_string())
}

fn local_clock(ts: i64) -> String {
    DateTime::<Utc>::from_timestamp(ts, 0)
        .map(|t| t.with_timezone(&Local).format("%H:%M:%S").to_string())
        .unwrap_or_else(|| ts.to_string())
}

fn print_event(out: &mut impl Write, event: &StoreEvent) -> io::Result<()> {
    match event {
        StoreEvent::Entry(e) => {
            let flag = if e.blocked { "  [blocked]" } else { "" };
            writeln!(out, "{}  {}{}", local_clock(e.ts), e.qname, flag)
        }
        StoreEvent::RecordingStarted { id, app_bundle_id, start_ts } => writeln!(
            out,
            "{}  --- recording {id} for {app_bundle_id} started; filters suspended",
            local_clock(*start_ts)
        ),
        StoreEvent::RecordingStopped { id, end_ts } => {
            writeln!(out, "{}  --- recording {id} stopped; filters active", local_clock(*end_ts))
        }
    }
}

fn monitor(ctx: &Ctx, args: MonitorArgs) -> Result<()> {
    let lock = backend::lock_store(&ctx.home)?.context("a monitor is already running for this store")?;
    let store = LogStore::open(ctx.home.store(), std::sync::Arc::new(SystemClock))
        .with_context(|| format!("opening {}", ctx.home.store().display()))?;
    let filters = FilterSet::load(&ctx.home.filters()).context("reading filters")?;
    let retention = match args.retention.or(ctx.config.retention_s) {
        Some(secs) => RetentionPolicy::max_age_secs(secs)?,
        None => RetentionPolicy::keep_forever(),
    };
    let config = MonitorConfig {
        proxy: ctx.config.proxy(args.listen, args.upstream, args.timeout),
        control: ctx.config.control(args.control),
        retention,
        purge_interval: DEFAULT_PURGE_INTERVAL,
        filters_path: Some(ctx.home.filters()),
    };
    let upstream = config.proxy.upstream;

    runtime()?.block_on(async {
        let mut handle = monitor::start(config, store, filters).await.context("starting monitor")?;
        std::fs::write(ctx.home.monitor_addr(), handle.control_addr().to_string())?;
        eprintln!(
            "DNS proxy on {} (upstream {upstream}), control API on http://{}",
            handle.dns_addr(),
            handle.control_addr()
        );
        let mut events = handle.subscribe();
        let mut stop = pin!(tokio::signal::ctrl_c());
        let stdout = io::stdout();
        loop {
            tokio::select! {
                _ = &mut stop => break,
                _ = handle.wait() => break,
                ev = events.recv() => match ev {
                    Ok(ev) if !args.quiet => print_event(&mut stdout.lock(), &ev)?,
                    Ok(_) => {}
                    Err(RecvError::Lagged(n)) => eprintln!("({n} events not shown)"),
                    Err(RecvError::Closed) => break,
                },
            }
        }
        handle.shutdown().await;
        let _ = std::fs::remove_file(ctx.home.monitor_addr());
        anyhow::Ok(())
    })?;
    drop(lock);
    Ok(())
}

fn duration(s: &RecordingSession) -> String {
    s.duration_s().map(|d| d.to_string()).unwrap_or_else(|| "-".into())
}

fn find_session<'a>(state: &'a StoreState, id: &str) -> Result<&'a RecordingSession> {
    let id = state.resolve_session(id)?;
    Ok(state.session(&id).expect("resolved id exists"))
}

fn record(ctx: &Ctx, cmd: RecordCmd) -> Result<()> {
    let mut b = backend::open(&ctx.home)?;
    match cmd {
        RecordCmd::Start { app, tags } => {
            let s = b.start_recording(&app, tags.into_iter().collect())?;
            println!("recording {} started for {}; filters suspended until it stops", s.id, s.app_bundle_id);
        }
        RecordCmd::Stop => {
            let s = b.stop_recording()?;
            let d = s.end_ts.map(|e| e - s.start_ts).unwrap_or(0);
            println!(
                "recording {} stopped: {} requests to {} names over {d} s",
                s.id, s.requests, s.distinct_names
            );
        }
        RecordCmd::List { tsv } => {
            let state = b.snapshot()?;
            let rows: Vec<Vec<String>> = state
                .sessions
                .iter()
                .map(|s| {
                    vec![
                        s.id.to_string(),
                        s.app_bundle_id.clone(),
                        s.state.to_string(),
                        utc(s.start_ts),
                        duration(s),
                        s.entries.len().to_string(),
                        s.name_counts().len().to_string(),
                        s.tags.iter().cloned().collect::<Vec<_>>().join(","),
                    ]
                })
                .collect();
            let header = ["id", "app", "state", "started (UTC)", "seconds", "requests", "names", "tags"];
            print!("{}", render(&header, &rows, &[4, 5, 6], tsv));
        }
        RecordCmd::Show { session, tsv } => {
            let state = b.snapshot()?;
            let s = find_session(&state, &session)?;
            let rows: Vec<Vec<String>> =
                s.name_counts().into_iter().map(|(n, c)| vec![c.to_string(), n.to_string()]).collect();
            print!("{}", render(&["requests", "name"], &rows, &[0], tsv));
        }
        RecordCmd::Delete { session } => {
            let state = b.snapshot()?;
            let id = state.resolve_session(&session)?;
            b.delete_session(&id)?;
            println!("deleted recording {id}");
        }
    }
    Ok(())
}

fn read_line(prompt: &str) -> Result<Option<String>> {
    eprint!("{prompt}");
    io::stderr().flush()?;
    let mut line = String::new();
    let n = io::stdin().lock().read_line(&mut line)?;
    Ok((n > 0).then(|| line.trim().to_owned()))
}

fn sanitize(ctx: &Ctx, args: SanitizeArgs) -> Result<()> {
    let mut b = backend::open(&ctx.home)?;
    let state = b.snapshot()?;
    let s = find_session(&state, &args.session)?;
    if s.state == SessionState::Active {
        bail!("session not stopped");
    }
    let counts = s.name_counts();
    let remove: BTreeSet<Fqdn> = if args.remove.is_empty() {
        let rows: Vec<Vec<String>> = counts
            .iter()
            .enumerate()
            .map(|(i, (n, c))| vec![(i + 1).to_string(), c.to_string(), n.to_string()])
            .collect();
        eprint!("{}", render(&["#", "requests", "name"], &rows, &[0, 1], false));
        let line = read_line("numbers or names to remove, separated by spaces (empty keeps all): ")?
            .context("no selection given")?;
        let mut picked = BTreeSet::new();
        for token in line.split([' ', ',']).filter(|t| !t.is_empty()) {
            let name = match token.parse::<usize>() {
                Ok(i) if (1..=counts.len()).contains(&i) => counts[i - 1].0.clone(),
                Ok(i) => bail!("no entry numbered {i}"),
                Err(_) => Fqdn::new(token).with_context(|| format!("invalid name {token:?}"))?,
            };
            picked.insert(name);
        }
        picked
    } else {
        args.remove.iter().map(|r| parse_name(r)).collect::<Result<_>>()?
    };
    for name in &remove {
        if !counts.iter().any(|(n, _)| n == name) {
            eprintln!("warning: {name} does not occur in recording {}", s.id);
        }
    }
    let removed_requests: usize = counts.iter().filter(|(n, _)| remove.contains(n)).map(|(_, c)| c).sum();
    let id = s.id.clone();
    let summary = b.sanitize(&id, remove.clone())?;
    println!(
        "removed {} names ({removed_requests} requests); recording {id} keeps {} requests to {} names",
        remove.len(),
        summary.requests,
        summary.distinct_names
    );
    Ok(())
}

fn upload(ctx: &Ctx, args: UploadArgs) -> Result<()> {
    let mut b = backend::open(&ctx.home)?;
    let state = b.snapshot()?;
    let session = find_session(&state, &args.session)?;
    if session.state == SessionState::Active {
        bail!("session not stopped");
    }
    let rec = minimizer::minimize(session)?;
    let doc = minimizer::serialize(&rec);
    let server = ctx.config.server(args.server);
    let names: BTreeSet<&Fqdn> = rec.entries.iter().map(|e| &e.qname).collect();
    eprintln!(
        "{} week {}: {} s, {} requests to {} names, tags [{}]",
        rec.app_bundle_id,
        rec.week_label(),
        rec.duration_s,
        rec.entries.len(),
        names.len(),
        rec.tags.iter().cloned().collect::<Vec<_>>().join(",")
    );
    if session.state == SessionState::Stopped {
        eprintln!("note: recording has not been reviewed with `appwatch sanitize`");
    }
    if !args.yes {
        let answer = read_line(&format!("send this recording to {server}? [y/N] "))?;
        if !matches!(answer.as_deref(), Some("y" | "Y" | "yes")) {
            bail!("upload not confirmed; nothing was sent");
        }
    }
    let url = format!("{}/api/v1/recordings", server.trim_end_matches('/'));
    let resp = http_agent()
        .post(&url)
        .content_type("application/json")
        .send(&doc[..])
        .with_context(|| format!("sending to {url}"))?;
    let body: Value = check(resp)?.body_mut().read_json()?;
    let id = body.get("id").and_then(Value::as_str).context("server reply has no id")?.to_owned();
    b.mark_uploaded(&session.id)?;
    println!("uploaded recording {} as {id}", session.id);
    Ok(())
}

fn export(ctx: &Ctx, args: ExportArgs) -> Result<()> {
    let dump = backend::open(&ctx.home)?.export()?;
    match args.output {
        Some(path) => std::fs::write(&path, dump).with_context(|| format!("writing {}", path.display())),
        None => Ok(io::stdout().write_all(dump.as_bytes())?),
    }
}

fn analyze(ctx: &Ctx, args: AnalyzeArgs) -> Result<()> {
    let target = parse_name(&args.domain)?;
    let query = match CoOccurrenceQuery::new(target, args.window) {
        Ok(q) => q,
        Err(e) => return usage(e.to_string()),
    };
    let state = backend::open(&ctx.home)?.snapshot()?;
    let entries = match &args.session {
        Some(id) => find_session(&state, id)?.entries.clone(),
        None => state.all_entries(),
    };
    let rows = match find_in_log(&entries, &query) {
        Ok(rows) => rows,
        Err(CoOccurrenceError::TargetNotFound(t)) => bail!("{t} does not occur in the log"),
        Err(e) => return Err(e.into()),
    };
    let rows: Vec<Vec<String>> = rows
        .iter()
        .take(args.limit.unwrap_or(usize::MAX))
        .map(|r| vec![r.domain.to_string(), r.n.to_string(), format!("{:.2}", r.mean_dt_s), format!("{:.5}", r.score)])
        .collect();
    print!("{}", render(&["domain", "N", "mean Δt", "score"], &rows, &[1, 2, 3], args.tsv));
    Ok(())
}

fn split_list_arg(arg: &str) -> Result<(&str, &str)> {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name, path)),
        _ => usage(format!("expected NAME=PATH, got {arg:?}")),
    }
}

pub fn load_lists(args: &ListArgs) -> Result<TrackerDb> {
    let mut db = TrackerDb::new();
    let sources = args
        .hosts_lists
        .iter()
        .map(|a| (a, true))
        .chain(args.domain_lists.iter().map(|a| (a, false)));
    for (arg, hosts) in sources {
        let (name, path) = split_list_arg(arg)?;
        let text = std::fs::read_to_string(path).with_context(|| format!("reading list {path}"))?;
        let parsed = if hosts { parse_hosts_list(name, &text) } else { parse_domain_list(name, &text) };
        eprintln!("list {name}: {} entries, {} lines skipped", parsed.list.len(), parsed.skipped);
        db.add(parsed.list);
    }
    Ok(db)
}

fn classify(args: ClassifyArgs) -> Result<()> {
    let mut names = Vec::new();
    for n in &args.names {
        names.push(parse_name(n)?);
    }
    if let Some(path) = &args.file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            match Fqdn::new(line) {
                Ok(n) => names.push(n),
                Err(e) => eprintln!("skipping {line:?}: {e}"),
            }
        }
    }
    if names.is_empty() {
        return usage("no names to classify; pass names or --file");
    }
    let db = load_lists(&args.lists)?;
    let results: Vec<_> = names.iter().map(|n| db.classify(n)).collect();
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|c| {
            vec![
                c.fqdn.to_string(),
                if c.is_tracker { "yes" } else { "no" }.to_owned(),
                c.matched_pattern.as_ref().map(Fqdn::to_string).unwrap_or_else(|| "-".into()),
                c.source.clone().unwrap_or_else(|| "-".into()),
                registrable_domain(&c.fqdn).to_string(),
            ]
        })
        .collect();
    print!("{}", render(&["name", "tracker", "matched", "source", "domain"], &rows, &[], args.tsv));
    if !args.tsv {
        let trackers = results.iter().filter(|c| c.is_tracker).count();
        println!(
            "\n{trackers} of {} names are known trackers ({})",
            results.len(),
            percent(trackers as f64 / results.len() as f64)
        );
    }
    Ok(())
}

fn serve(ctx: &Ctx, args: ServeArgs) -> Result<()> {
    let listen = args
        .listen
        .or(ctx.config.serve_listen)
        .unwrap_or_else(|| DEFAULT_SERVE_LISTEN.parse().expect("valid default"));
    let data_dir = args.data_dir.or_else(|| ctx.config.data_dir.clone()).unwrap_or_else(|| ctx.home.server_data());
    let db = load_lists(&args.lists)?;
    let agg = Aggregator::open(&data_dir, db).with_context(|| format!("opening {}", data_dir.display()))?;
    eprintln!("{} recordings of {} apps loaded from {}", agg.recording_count(), agg.app_ids().len(), data_dir.display());
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(listen).await.with_context(|| format!("binding {listen}"))?;
        eprintln!("serving on http://{}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        aggregator::api::serve(listener, std::sync::Arc::new(agg), shutdown).await?;
        anyhow::Ok(())
    })
}

fn filters(ctx: &Ctx, cmd: FiltersCmd) -> Result<()> {
    let mut b = backend::open(&ctx.home)?;
    match cmd {
        FiltersCmd::Add { pattern, block, ignore: _, subdomains } => {
            let pattern = parse_name(&pattern)?;
            let mode = if block { FilterMode::Block } else { FilterMode::Ignore };
            b.add_filter(FilterRule { pattern: pattern.clone(), mode, include_subdomains: subdomains })?;
            let verb = if block { "block" } else { "ignore" };
            let scope = if subdomains { " and its subdomains" } else { "" };
            println!("{verb} {pattern}{scope}");
            if b.filters()?.suspended {
                println!("note: filters are suspended while a recording is active");
            }
        }
        FiltersCmd::Remove { pattern } => {
            let pattern = parse_name(&pattern)?;
            if !b.remove_filter(&pattern)? {
                bail!("no rule for {pattern}");
            }
            println!("removed rule for {pattern}");
        }
        FiltersCmd::List { tsv } => {
            let listing = b.filters()?;
            let rows: Vec<Vec<String>> = listing
                .rules
                .iter()
                .map(|r| {
                    let mode = match r.mode {
                        FilterMode::Block => "block",
                        FilterMode::Ignore => "ignore",
                    };
                    vec![r.pattern.to_string(), mode.to_owned(), if r.include_subdomains { "yes" } else { "no" }.to_owned()]
                })
                .collect();
            print!("{}", render(&["pattern", "mode", "subdomains"], &rows, &[], tsv));
            if listing.suspended && !tsv {
                println!("(suspended while a recording is active)");
            }
        }
    }
    Ok(())
}

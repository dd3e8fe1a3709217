use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use eigenmine::eval::{
    recall_at_n, similarity_matrix, DescriptorSet, GroundTruthMode, DEFAULT_MAX_FRAMES, DEFAULT_RADIUS_M,
};
use eigenmine::geo::{assign_cell, bucket_images, group_of};
use eigenmine::io::{
    read_class_manifest, read_descriptors, read_image_manifest, write_class_manifest, write_descriptors,
    write_image_manifest, ClassRecord, FlatConfig,
};
use eigenmine::mining::{mine_classes, principal_frame};
use eigenmine::trainer::{eval_splits, generate_synthetic, smoothed, train, SyntheticDataset, TrainState};
use eigenmine::{Error, ImageRecord, UtmPoint};
use serde::{Deserialize, Serialize};

use crate::config::resolve;
use crate::{EvalArgs, MineArgs, ModeArg, PartitionArgs, SimMatrixArgs, TrainToyArgs};

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Runs `write` against `path`, or stdout when there is none.
fn emit(path: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            write(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            write(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    emit(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    read_image_manifest(open(path)?).with_context(|| format!("reading manifest {}", path.display()))
}

fn load_descriptors(path: &Path) -> Result<DescriptorSet> {
    read_descriptors(open(path)?).with_context(|| format!("reading descriptors {}", path.display()))
}

#[derive(Serialize)]
struct CellStats {
    cell: [i64; 2],
    group: [u32; 2],
    count: usize,
}

#[derive(Serialize)]
struct GroupStats {
    group: [u32; 2],
    cells: usize,
    images: usize,
}

#[derive(Serialize)]
struct PartitionStats {
    num_images: usize,
    num_cells: usize,
    cell_side_m: f64,
    group_spacing_n: u32,
    cells: Vec<CellStats>,
    groups: Vec<GroupStats>,
}

pub fn partition(args: &PartitionArgs) -> Result<()> {
    let mut flags = FlatConfig::default();
    args.grid.apply(&mut flags);
    let grid = resolve(args.config.config.as_deref(), flags)?.grid()?;
    let images = load_manifest(&args.manifest)?;
    let buckets = bucket_images(&images, &grid)?;

    let mut groups: BTreeMap<(u32, u32), (usize, usize)> = BTreeMap::new();
    let cells: Vec<CellStats> = buckets
        .iter()
        .map(|(cell, members)| {
            let g = group_of(*cell, &grid);
            let entry = groups.entry((g.grow, g.gcol)).or_default();
            entry.0 += 1;
            entry.1 += members.len();
            CellStats {
                cell: [cell.col, cell.row],
                group: [g.gcol, g.grow],
                count: members.len(),
            }
        })
        .collect();
    let stats = PartitionStats {
        num_images: images.len(),
        num_cells: cells.len(),
        cell_side_m: grid.cell_side_m,
        group_spacing_n: grid.group_spacing_n,
        cells,
        groups: groups
            .into_iter()
            .map(|((grow, gcol), (cells, images))| GroupStats {
                group: [gcol, grow],
                cells,
                images,
            })
            .collect(),
    };
    log::info!("{} images in {} cells", stats.num_images, stats.num_cells);
    write_json(args.out.as_deref(), &stats)
}

pub fn mine(args: &MineArgs) -> Result<()> {
    let mut flags = FlatConfig::default();
    args.grid.apply(&mut flags);
    args.mining.apply(&mut flags);
    let cfg = resolve(args.config.config.as_deref(), flags)?;
    let (grid, mining) = (cfg.grid()?, cfg.mining()?);
    let images = load_manifest(&args.manifest)?;
    let mined = mine_classes(&bucket_images(&images, &grid)?, &mining)?;
    let records: Vec<ClassRecord> = mined.classes.iter().map(ClassRecord::from).collect();

    let mut w = create(&args.out)?;
    write_class_manifest(&mut w, &records)?;
    w.flush()?;
    let r = &mined.report;
    log::info!(
        "{} lateral and {} frontal classes from {} of {} cells",
        r.lateral_classes,
        r.frontal_classes,
        r.cells_mined,
        r.cells_total
    );
    if let Some(path) = &args.report {
        write_json(Some(path), r)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    iterations: usize,
    epochs_completed: u64,
    lateral_classes: usize,
    frontal_classes: usize,
    initial_loss: f64,
    final_smoothed_loss: f64,
    loss_ratio: f64,
    radius_m: f64,
    side_view_recall: BTreeMap<usize, f64>,
    frontal_view_recall: BTreeMap<usize, f64>,
}

/// Smoothing window of the exported loss curve.
const SMOOTHING_WINDOW: usize = 100;

fn export_split(dir: &Path, name: &str, state: &TrainState, data: &SyntheticDataset) -> Result<DescriptorSet> {
    let ids: Vec<String> = data.images.iter().map(|i| i.id.clone()).collect();
    let set = state.encode(&ids, &data.features)?;
    let mut w = create(&dir.join(format!("{name}.bin")))?;
    write_descriptors(&mut w, &set)?;
    w.flush()?;
    let mut w = create(&dir.join(format!("{name}.jsonl")))?;
    write_image_manifest(&mut w, &data.images)?;
    w.flush()?;
    let positions = data.images.iter().map(|i| (i.id.clone(), i.position)).collect();
    Ok(set.with_positions(positions))
}

pub fn train_toy(args: &TrainToyArgs) -> Result<()> {
    let mut flags = FlatConfig::default();
    args.mining.apply(&mut flags);
    args.synthetic.apply(&mut flags);
    args.train.apply(&mut flags);
    let cfg = resolve(args.config.config.as_deref(), flags)?;
    let (synthetic, mining, train_cfg) = (cfg.synthetic()?, cfg.mining()?, cfg.train()?);
    if synthetic.descriptor_dim != train_cfg.descriptor_dim {
        bail!("descriptor dim mismatch between synthetic and training config");
    }
    let radius_m = cfg.radius_m.unwrap_or(DEFAULT_RADIUS_M);

    let (world, data) = generate_synthetic(&synthetic)?;
    let out = train(&data.images, &data.features, &mining, &train_cfg)?;

    let dir = args.out_dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut w = create(&dir.join("classes.jsonl"))?;
    write_class_manifest(&mut w, &out.classes.iter().map(ClassRecord::from).collect::<Vec<_>>())?;
    w.flush()?;

    let ema = smoothed(&out.history, SMOOTHING_WINDOW);
    let mut w = create(&dir.join("history.csv"))?;
    writeln!(w, "iteration,loss,smoothed_loss")?;
    for (i, (loss, s)) in out.history.iter().zip(&ema).enumerate() {
        writeln!(w, "{i},{loss},{s}")?;
    }
    w.flush()?;

    export_split(dir, "train", &out.state, &data)?;
    let splits = eval_splits(&world, args.db_per_street, args.queries_per_street);
    let db = export_split(dir, "database", &out.state, &splits.database)?;
    let side = export_split(dir, "side_queries", &out.state, &splits.side_queries)?;
    let frontal = export_split(dir, "frontal_queries", &out.state, &splits.frontal_queries)?;

    let mode = GroundTruthMode::DistanceThreshold { radius_m };
    let ns = eigenmine::eval::DEFAULT_RECALL_NS;
    let initial = out.history[0];
    let last = *ema.last().expect("at least one iteration");
    let summary = TrainSummary {
        iterations: out.history.len(),
        epochs_completed: out.epochs_completed,
        lateral_classes: out.mining_report.lateral_classes,
        frontal_classes: out.mining_report.frontal_classes,
        initial_loss: initial,
        final_smoothed_loss: last,
        loss_ratio: last / initial,
        radius_m,
        side_view_recall: recall_at_n(&side, &db, mode, &ns)?.recalls,
        frontal_view_recall: recall_at_n(&frontal, &db, mode, &ns)?.recalls,
    };
    log::info!("loss {initial:.3} -> {last:.4}");
    write_json(Some(&dir.join("summary.json")), &summary)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    id: String,
    frame: i64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    query: String,
    db: String,
}

/// Reads JSON lines into a map, rejecting repeated keys.
fn read_keyed<T: for<'de> Deserialize<'de>, V>(
    path: &Path,
    split: impl Fn(T) -> (String, V),
) -> Result<HashMap<String, V>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(line)
            .map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
            .with_context(|| format!("reading {}", path.display()))?;
        let (k, v) = split(record);
        if out.contains_key(&k) {
            return Err(Error::DuplicateId(k)).with_context(|| format!("reading {}", path.display()));
        }
        out.insert(k, v);
    }
    Ok(out)
}

fn positions(path: Option<&Path>, what: &str) -> Result<HashMap<String, UtmPoint>> {
    let Some(path) = path else {
        bail!("distance mode needs --{what}-manifest");
    };
    Ok(load_manifest(path)?.into_iter().map(|i| (i.id, i.position)).collect())
}

fn frames(path: Option<&Path>, what: &str) -> Result<HashMap<String, i64>> {
    let Some(path) = path else {
        bail!("frames mode needs --{what}-frames");
    };
    read_keyed(path, |r: FrameRecord| (r.id, r.frame))
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = resolve(args.config.config.as_deref(), FlatConfig::default())?;
    let mut queries = load_descriptors(&args.queries)?;
    let mut database = load_descriptors(&args.database)?;
    let mode = match args.mode {
        ModeArg::Distance => {
            queries = queries.with_positions(positions(args.query_manifest.as_deref(), "query")?);
            database = database.with_positions(positions(args.db_manifest.as_deref(), "db")?);
            GroundTruthMode::DistanceThreshold {
                radius_m: args.radius.or(cfg.radius_m).unwrap_or(DEFAULT_RADIUS_M),
            }
        }
        ModeArg::Frames => {
            queries = queries.with_frames(frames(args.query_frames.as_deref(), "query")?);
            database = database.with_frames(frames(args.db_frames.as_deref(), "db")?);
            GroundTruthMode::FrameThreshold {
                max_frames: args.max_frames.or(cfg.max_frames).unwrap_or(DEFAULT_MAX_FRAMES),
            }
        }
        ModeArg::Pairs => {
            let Some(path) = args.pairs.as_deref() else {
                bail!("pairs mode needs --pairs");
            };
            queries = queries.with_pairs(read_keyed(path, |r: PairRecord| (r.query, r.db))?);
            GroundTruthMode::ExactPair
        }
    };
    let mut report = recall_at_n(&queries, &database, mode, &args.recall_at)?;
    if report.k_clamped {
        log::warn!("database has fewer than {} images", args.recall_at.iter().max().unwrap_or(&0));
    }
    if !args.predictions {
        report.predictions.clear();
    }
    write_json(args.out.as_deref(), &report)
}

pub fn sim_matrix(args: &SimMatrixArgs) -> Result<()> {
    let mut flags = FlatConfig::default();
    args.grid.apply(&mut flags);
    let grid = resolve(args.config.config.as_deref(), flags)?.grid()?;
    let cell = args.cell;

    let classes = read_class_manifest(open(&args.classes)?)
        .with_context(|| format!("reading classes {}", args.classes.display()))?;
    let mut ids: Vec<String> = classes
        .iter()
        .filter(|c| c.cell_index() == cell && args.role.is_none_or(|r| r == c.role))
        .flat_map(|c| c.members.iter().map(|m| m.id.clone()))
        .collect();
    ids.sort();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::MissingCell(cell).into());
    }

    let images = load_manifest(&args.manifest)?;
    let mut in_cell = Vec::new();
    for image in &images {
        if assign_cell(image.position, &grid)? == cell {
            in_cell.push(image.position);
        }
    }
    let frame = principal_frame(&in_cell).with_context(|| format!("principal frame of cell {cell}"))?;
    let descriptors = load_descriptors(&args.descriptors)?
        .with_positions(images.into_iter().map(|i| (i.id, i.position)).collect());
    let matrix = similarity_matrix(&ids, &descriptors, &frame)?;
    emit(args.out.as_deref(), |w| Ok(matrix.write_csv(w)?))
}

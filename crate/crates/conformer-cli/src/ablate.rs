//! Ablation grids: heads, embedding size, and conv-block size, with the
//! published full-scale numbers printed beside the local measurements.

use crate::runspec::{ConvChoice, RunSpec};
use crate::tables::reference_for;
use crate::{resolve_spec, run_training, usage, SpecFlags};
use anyhow::Result;
use clap::Args;
use conformer::model::count_parameters;
use conformer::train::{evaluate, Split};
use std::fmt::Write as _;

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Which grid to run: heads | embed | conv.
    #[arg(long)]
    grid: String,
    /// desk: truncated data, 3 epochs, 4-layer backbone.
    /// paper: full data, 30 epochs, 6-layer backbone.
    #[arg(long, default_value = "desk")]
    scale: String,
    /// Comma-separated seed set shared by every arm.
    #[arg(long, default_value = "0")]
    seeds: String,
    #[command(flatten)]
    spec: SpecFlags,
}

struct ArmResult {
    arm: String,
    params: usize,
    val_nll: Vec<f64>,
    val_acc: Vec<f64>,
    test_nll: Vec<f64>,
    test_acc: Vec<f64>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    }
}

pub fn cmd_ablate(args: AblateArgs) -> Result<()> {
    if !["heads", "embed", "conv"].contains(&args.grid.as_str()) {
        return Err(usage(format!(
            "unknown grid `{}` (heads|embed|conv)",
            args.grid
        )));
    }
    let desk = match args.scale.as_str() {
        "desk" => true,
        "paper" => false,
        other => return Err(usage(format!("unknown scale `{}` (desk|paper)", other))),
    };
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| s.parse().map_err(|_| usage(format!("bad seed `{}`", s))))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(usage("at least one seed is required"));
    }

    // Scale defaults fill flags the user left unset; explicit flags win.
    let mut flags = args.spec.clone();
    let fill = |slot: &mut Option<usize>, v: usize| {
        if slot.is_none() {
            *slot = Some(v);
        }
    };
    if desk {
        fill(&mut flags.layers, 4);
        fill(&mut flags.epochs, 3);
        fill(&mut flags.batch, 32);
        if flags.limit.is_none() {
            flags.limit = Some(5_000_000);
        }
    } else {
        eprintln!(
            "note: --scale paper runs the full published protocol; on a single CPU core \
             this takes days per arm"
        );
        fill(&mut flags.layers, 6);
        fill(&mut flags.epochs, 30);
        fill(&mut flags.batch, 32);
    }
    // Grid backbones (conv grid at paper scale uses the larger body).
    match args.grid.as_str() {
        "heads" => {
            fill(&mut flags.embed, 64);
            fill(&mut flags.ff, 128);
            if flags.conv.is_none() {
                flags.conv = Some("small".into());
            }
        }
        "embed" => {
            fill(&mut flags.heads, 8);
            if flags.conv.is_none() {
                flags.conv = Some("small".into());
            }
        }
        "conv" => {
            fill(&mut flags.heads, 8);
            fill(&mut flags.embed, if desk { 64 } else { 256 });
        }
        _ => unreachable!(),
    }

    let base = resolve_spec(&flags, &format!("ablate-{}-{}", args.grid, args.scale), true, true)?;
    std::fs::create_dir_all(&base.out)?;

    let arms: Vec<(String, RunSpec)> = match args.grid.as_str() {
        "heads" => [4usize, 8, 16, 32]
            .iter()
            .map(|&h| {
                let mut s = base.clone();
                s.heads = h;
                (h.to_string(), s)
            })
            .collect(),
        "embed" => [16usize, 64, 256]
            .iter()
            .map(|&e| {
                let mut s = base.clone();
                s.embed = e;
                if args.spec.ff.is_none() {
                    s.ff = 2 * e;
                }
                (e.to_string(), s)
            })
            .collect(),
        "conv" => [ConvChoice::None, ConvChoice::Small, ConvChoice::Large]
            .iter()
            .map(|&c| {
                let mut s = base.clone();
                s.conv = c;
                (c.as_str().to_string(), s)
            })
            .collect(),
        _ => unreachable!(),
    };

    let mut results: Vec<ArmResult> = Vec::new();
    for (name, arm_spec) in &arms {
        arm_spec.model_config().validate()?;
        let mut res = ArmResult {
            arm: name.clone(),
            params: count_parameters(&arm_spec.model_config()).total,
            val_nll: vec![],
            val_acc: vec![],
            test_nll: vec![],
            test_acc: vec![],
        };
        for &seed in &seeds {
            let mut s = arm_spec.clone();
            s.seed = seed;
            s.out = base.out.join(format!("arm-{}-seed{}", name, seed));
            eprintln!("== arm {} seed {} -> {}", name, seed, s.out.display());
            let (output, test_split) = run_training(&s)?;
            let last_val = output
                .history
                .iter()
                .rev()
                .find(|r| r.split == Split::Val)
                .ok_or_else(|| anyhow::anyhow!("no validation record produced"))?;
            res.val_nll.push(last_val.nll_nats);
            res.val_acc.push(last_val.accuracy);
            let test = evaluate(&output.params, &s.model_config(), &test_split)?;
            res.test_nll.push(test.nll_nats);
            res.test_acc.push(test.accuracy);
        }
        results.push(res);
    }

    // Summary: measured medians beside the published full-scale numbers.
    let mut csv = String::from(
        "arm,params,val_nll_median,val_accuracy_median,test_nll_median,test_accuracy_median,paper_nll,paper_accuracy_pct\n",
    );
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<8} {:>12} | {:>12} {:>9} | {:>14} {:>11}",
        "arm", "params", "measured NLL", "acc", "paper NLL(ref)", "acc(ref)"
    );
    let _ = writeln!(table, "{}", "-".repeat(78));
    for r in &results {
        let reference = reference_for(&args.grid, &r.arm);
        let (ref_nll, ref_acc) = match reference {
            Some(row) => (
                format!("{:.3}", row.nll),
                row.accuracy_pct
                    .map(|a| format!("{:.2}%", a))
                    .unwrap_or_else(|| "-".into()),
            ),
            None => ("-".into(), "-".into()),
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.arm,
            r.params,
            median(&r.val_nll),
            median(&r.val_acc),
            median(&r.test_nll),
            median(&r.test_acc),
            reference.map(|x| x.nll.to_string()).unwrap_or_else(|| "".into()),
            reference
                .and_then(|x| x.accuracy_pct)
                .map(|a| a.to_string())
                .unwrap_or_else(|| "".into()),
        );
        let _ = writeln!(
            table,
            "{:<8} {:>12} | {:>12.4} {:>8.2}% | {:>14} {:>11}",
            r.arm,
            r.params,
            median(&r.val_nll),
            median(&r.val_acc) * 100.0,
            ref_nll,
            ref_acc
        );
    }
    let _ = writeln!(
        table,
        "(measured: {} scale on local data, validation split; reference: published full-scale runs)",
        args.scale
    );
    std::fs::write(base.out.join("summary.csv"), &csv)?;
    std::fs::write(base.out.join("summary.txt"), &table)?;
    println!("{}", table);
    eprintln!("wrote summary.csv and summary.txt to {}", base.out.display());
    Ok(())
}

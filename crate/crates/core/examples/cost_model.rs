//! Parameter and FLOP counts for the registered WRN teachers, and how a
//! compression action shrinks them.
//!
//! ```bash
//! cargo run --example cost_model
//! ```

use rcnas::arch::{apply_action, cost_model, teacher_from_name, CompressionAction};

fn main() -> rcnas::Result<()> {
    println!("{:<10} {:>9} {:>9}", "teacher", "params", "FLOPs");
    for name in ["WRN-28-10", "WRN-34-12", "WRN-46-14", "WRN-70-16"] {
        let d = teacher_from_name(name)?;
        let c = cost_model(&d, 32)?;
        println!("{name:<10} {:>8.1}M {:>8.2}G", c.mparams(), c.gflops());
    }

    let teacher = teacher_from_name("WRN-28-10")?;
    let base = cost_model(&teacher, 32)?;
    for keep in [0.75, 0.5, 0.25] {
        let student = apply_action(&teacher, &CompressionAction::uniform(&teacher, keep, keep))?;
        let c = cost_model(&student, 32)?;
        let shape: Vec<String> = student.stages().iter().map(|s| format!("{}x{}", s.depth, s.width)).collect();
        println!(
            "keep {keep:.2}: stages [{}]  {:.2}G ({:.0}% of teacher)",
            shape.join(", "),
            c.gflops(),
            100.0 * c.flops as f64 / base.flops as f64
        );
    }

    // Dropping a downsample keeps the feature maps large, so the student can
    // end up costing more than its teacher.
    let mut action = CompressionAction::uniform(&teacher, 0.5, 0.5);
    action.per_stage[2].downsample = false;
    let wide = cost_model(&apply_action(&teacher, &action)?, 32)?;
    println!("keep 0.50 without the last downsample: {:.2}G", wide.gflops());
    Ok(())
}

//! Process exit codes. Usage errors exit with 2 (clap's convention).

use dacil::Error;

pub const CONFIG: u8 = 3;
pub const UNKNOWN_STAGE: u8 = 30;

/// Exit code of a failed pipeline stage.
pub fn code(stage: &str) -> u8 {
    match stage {
        "synth" => 10,
        "gtdb" => 11,
        "augment" => 12,
        "pretrain" => 13,
        "finetune" => 14,
        "train" => 15,
        "baseline" => 16,
        "eval" => 17,
        "grad-check" => 18,
        "report" => 19,
        "run-experiment" => 20,
        _ => UNKNOWN_STAGE,
    }
}

/// Stage-tagged errors report their own stage, anything else the stage of
/// the running command.
pub fn for_error(e: &Error, command: &str) -> u8 {
    code(e.stage().unwrap_or(command))
}

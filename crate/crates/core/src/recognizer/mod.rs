//! Per-language CTC recognizers over a shared, append-only union label space.

mod branch;
mod charset;
mod ctc;
mod frames;
mod probs;
mod train;

pub use branch::{BranchShape, BranchVars, RecognizerBranch, MASK_LOGIT, PARAM_NAMES};
pub use charset::{UnionCharset, BLANK};
pub use ctc::{adjacent_repeats, check_feasible, ctc_batch, ctc_greedy_decode, ctc_loss_and_grad, CtcOutcome};
pub use frames::FrameConfig;
pub use probs::{pad_to_union, SequenceProbs};
pub use train::{fit, train_branch, train_branch_on, word_accuracy, TrainConfig, TrainReport};

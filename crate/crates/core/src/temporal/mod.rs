//! Sequence encoders: LSTM stacks and transformer blocks.

mod attention;
mod lstm;

pub use attention::{multi_head, positional_encoding, self_attention, transformer_encode, EncoderBlock, EncoderShape, HeadParams};
pub use lstm::{init_lstm_cell, lstm_cell_step, lstm_sequence, LstmCell, LstmGates, LstmStack, LstmState};

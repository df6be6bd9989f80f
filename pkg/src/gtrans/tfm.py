"""
Token transformer: S encoder blocks followed by S cross-attending decoder blocks.

Tokens are laid out as (B, d, N) with N = g * L token columns. There is no
position embedding, so the stack is equivariant to any permutation of the
token columns.
"""

import math

import torch
from torch import nn

from src.config import LAYER_NORM_EPS
from src.models import ConfigError, ShapeError, TfmConfig, TokenGroup


class AttentionBlock(nn.Module):
    """
    Single-head attention block with a point-wise-convolution feed-forward.

        q = W_q X, k = W_k C, v = W_v C
        A = v softmax(k^T q / sqrt(d))       (softmax over keys, per query)
        X_a = X + LayerNorm(A)
        out = LayerNorm(X_a + L_1 relu(L_2 X_a))

    With C = X this is an encoder block; with C = encoder output it is a
    decoder block.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.l_1 = nn.Conv1d(dim, dim, kernel_size=1)
        self.l_2 = nn.Conv1d(dim, dim, kernel_size=1)
        self.attn_norm = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)
        self.out_norm = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)

    def forward(
        self,
        x: torch.Tensor,
        context: torch.Tensor | None = None,
        return_attention: bool = False,
    ) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            x: (B, d, N) query tokens.
            context: (B, d, N) key/value tokens; defaults to x.
            return_attention: Also return the (B, N_keys, N_queries) weights.
        """
        context = x if context is None else context
        if x.ndim != 3 or x.shape[1] != self.dim:
            raise ShapeError(f"Expected (B, {self.dim}, N) tokens, got {tuple(x.shape)}")
        if context.shape != x.shape:
            raise ShapeError(
                f"Query tokens {tuple(x.shape)} and context {tuple(context.shape)} differ"
            )

        x_t = x.transpose(1, 2)
        c_t = context.transpose(1, 2)
        q = self.w_q(x_t)
        k = self.w_k(c_t)
        v = self.w_v(c_t)

        # (B, N_keys, N_queries); each query column is a distribution over keys
        attention = (k @ q.transpose(1, 2) / math.sqrt(self.dim)).softmax(dim=1)
        attended = attention.transpose(1, 2) @ v

        x_a = x_t + self.attn_norm(attended)
        feed = self.l_1(torch.relu(self.l_2(x_a.transpose(1, 2)))).transpose(1, 2)
        out = self.out_norm(x_a + feed).transpose(1, 2)
        if return_attention:
            return out, attention
        return out


def encoder_block(E_in: torch.Tensor, params: AttentionBlock) -> torch.Tensor:
    out = params(E_in)
    assert isinstance(out, torch.Tensor)
    return out


def decoder_block(
    D_in: torch.Tensor, E_out: torch.Tensor, params: AttentionBlock
) -> torch.Tensor:
    out = params(D_in, E_out)
    assert isinstance(out, torch.Tensor)
    return out


class TFM(nn.Module):
    """Encoder and (optional) decoder stacks with independent per-block parameters."""

    def __init__(self, dim: int, config: TfmConfig):
        super().__init__()
        if config.blocks < 1:
            raise ConfigError(f"tfm.blocks must be >= 1, got {config.blocks}")
        self.config = config
        self.encoders = nn.ModuleList(AttentionBlock(dim) for _ in range(config.blocks))
        self.decoders = nn.ModuleList(
            AttentionBlock(dim) for _ in range(config.blocks if config.use_decoder else 0)
        )

    def forward(
        self, E_in: torch.Tensor, D_in: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        if E_in.shape != D_in.shape:
            raise ShapeError(
                f"Encoder input {tuple(E_in.shape)} and decoder input "
                f"{tuple(D_in.shape)} differ"
            )
        E = E_in
        for block in self.encoders:
            E = encoder_block(E, block)
        if not self.decoders:
            return E, None
        D = D_in
        for block in self.decoders:
            D = decoder_block(D, E, block)
        return E, D


def tfm_forward(
    T_G: TokenGroup, T_T: TokenGroup, params: TFM
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """
    Run the stack with guide tokens as encoder input and student tokens as decoder input.

    Returns:
        (E_out, D_out); D_out is None for the pure-encoder variant.
    """
    if T_G.tokens.shape != T_T.tokens.shape or T_G.groups != T_T.groups:
        raise ShapeError(
            f"Guide tokens {tuple(T_G.tokens.shape)} and student tokens "
            f"{tuple(T_T.tokens.shape)} differ"
        )
    return params(T_G.tokens, T_T.tokens)

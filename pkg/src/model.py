import logging

import numpy as np

from src.decoder import DecoderConfig, DecoderWeights, decoder_forward, predict_single
from src.encoder import EncoderConfig, EncoderWeights, encoder_forward
from src.utils.errors import ShapeError


logger = logging.getLogger('pladapt.model')


class QuadFormer:
    """Quadruple-branch encoder plus cross-domain decoder."""

    def __init__(self, encoder_config, decoder_config, seed=0, cross_source=True, cross_target=True):
        rng = np.random.default_rng(seed)
        self.encoder_config = encoder_config
        self.decoder_config = decoder_config
        self.encoder = EncoderWeights(encoder_config, rng)
        self.decoder = DecoderWeights(decoder_config, rng)
        self.cross_source = cross_source
        self.cross_target = cross_target

    @classmethod
    def from_config(cls, config):
        encoder_config = EncoderConfig.build(
            config.channels, config.depths, config.heads, config.reductions,
            patch_size=config.patch_size, mlp_ratio=config.mlp_ratio,
            shared_cross_weights=config.shared_cross_weights,
        )
        decoder_config = DecoderConfig(
            stage_channels=tuple(config.channels), embed_dim=config.embed_dim,
            num_classes=config.num_classes, shared=config.shared_decoder,
            extra_layer=config.decoder_extra_layer,
        )
        return cls(encoder_config, decoder_config, seed=config.seed,
                   cross_source=config.cross_source, cross_target=config.cross_target)

    def check_input(self, img):
        multiple = self.encoder_config.size_multiple
        if img.ndim != 3 or img.shape[1] % multiple or img.shape[2] % multiple:
            raise ShapeError(f'image of shape {img.shape} is not [3, H, W] with sides divisible by {multiple}')

    def forward(self, img_s, img_t):
        """Paired forward; returns (M_s, M_t). M_t.features holds [phi_t, phi_st]."""
        self.check_input(img_s)
        stages = encoder_forward(img_s, img_t, self.encoder, self.cross_source, self.cross_target)
        return decoder_forward(stages, self.decoder)

    def forward_single(self, img, domain='target'):
        """Self-attention-only path; the target head with domain='target' is source-free inference."""
        self.check_input(img)
        head_s, head_t = self.decoder_config.heads
        return predict_single(img, self.encoder, self.decoder, head_t if domain == 'target' else head_s)

    def sync_heads(self):
        """Copy the source head into the target head when the decoder is not shared."""
        if self.decoder_config.shared:
            return
        for name, tensor in self.decoder.named_parameters():
            if name.startswith('dec_s.'):
                self.decoder['dec_t.' + name[len('dec_s.'):]].data[...] = tensor.data

    def parameters(self):
        return self.encoder.named_parameters() + self.decoder.named_parameters()

    def count_parameters(self):
        return self.encoder.count() + self.decoder.count()

    def state(self):
        state = {f'encoder/{k}': v for k, v in self.encoder.state().items()}
        state.update({f'decoder/{k}': v for k, v in self.decoder.state().items()})
        return state

    def load_state(self, state):
        self.encoder.load_state({k[len('encoder/'):]: v for k, v in state.items() if k.startswith('encoder/')})
        self.decoder.load_state({k[len('decoder/'):]: v for k, v in state.items() if k.startswith('decoder/')})

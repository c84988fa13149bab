from ivbart.models.variant import F2Draw, Stage2Design, Stage2Model, Stage2Settings, Variant, model_type  # noqa: F401
from ivbart.models.npivbart_h import NpivBartH  # noqa: F401
from ivbart.models.npivbart_g import NpivBartG  # noqa: F401
from ivbart.models.ivbart_h import IvBartH  # noqa: F401
from ivbart.models.ivbart_g import IvBartG, update_beta, beta_prior_sd  # noqa: F401
from ivbart.models.plain_bart import PlainBart, calibrate_lambda, draw_residual_variance  # noqa: F401

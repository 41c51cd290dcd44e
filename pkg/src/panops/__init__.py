"""Deformable sampling operators, panoramic warps, and segmentation metrics."""

from .deform import (DeformGradients, DeformParams, dao_forward, dcn_forward,
                     dcnv2_forward, dcnv3_forward, dcnv4_forward,
                     deform_backward, fd_gradient, gradcheck,
                     trace_receptive_field)
from .imgio import (Palette, decode_labels, encode_labels, load_image,
                    load_labels, load_palette, render_offsets, save_image,
                    save_labels, save_palette)
from .metrics import (IGNORE_ID, Taxonomy, check_similarity, confusion,
                      load_similarity_csv, metric_report, miou, open_miou,
                      save_similarity_csv, similarity_from_taxonomy,
                      wup_similarity)
from .panogeom import (ErpParams, RerpConfig, WarpSpec, erp_forward,
                       erp_inverse, horizontal_rotate, rerp_augment,
                       shuffle_tiles, warp_pinhole_to_erp)
from .salience import (patch_cosine_similarity, salience_upper_bound,
                       salient_map)
from .tensor import (BorderPolicy, FormatError, Tensor, bilinear_sample,
                     conv2d_reference, load_tensor, save_tensor)

__version__ = "0.1.0"

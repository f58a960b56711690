"""Place recognition and re-localization over pre-extracted image features."""
from .database import KeyframeDatabase, LcdConfig, LoopClosure, global_distance
from .errors import DataError, DxlocError, GeometryError
from .features import (CameraIntrinsics, FrameFeatures, Keypoint, lift_keypoints,
                       read_frame_features, write_frame_features)
from .geometry import (Correspondence, Pose, RansacParams, p3p_solve, project, ransac_pnp,
                       refine_pose)
from .relocalization import RelocConfig, form_groups, match_to_group, relocalize, retrieve_candidates
from .vocabulary import (MatchParams, VisualVector, Vocabulary, build_tree, compute_visual_vector,
                         load_vocab, match_adjacent, quantize, save_vocab, similarity,
                         train_incremental)

__version__ = "0.1.0"

#pragma once

#include "tripledml/data.hpp"
#include "tripledml/diffcore.hpp"
#include "tripledml/encoder.hpp"
#include "tripledml/errors.hpp"
#include "tripledml/fixtures.hpp"
#include "tripledml/gradcheck.hpp"
#include "tripledml/hyper.hpp"
#include "tripledml/losses.hpp"
#include "tripledml/reporting.hpp"
#include "tripledml/rng.hpp"
#include "tripledml/training.hpp"

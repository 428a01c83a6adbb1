#ifndef ODSMI_NUMKIT_HPP
#define ODSMI_NUMKIT_HPP

#include "odsmi/numkit/bvn.hpp"
#include "odsmi/numkit/logistic.hpp"
#include "odsmi/numkit/normal.hpp"
#include "odsmi/numkit/optimize.hpp"

#endif
